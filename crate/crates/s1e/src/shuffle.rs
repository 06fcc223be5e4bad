//! Resolution-changing feature operators.
//!
//! A vision encoder emits one feature vector per image patch. Before those
//! features enter the language model they are compressed by pixel shuffle:
//! each `s x s` block of neighbouring features is concatenated into a single
//! token of `alpha * d0` channels (`alpha = s^2`) and projected to width `d`
//! by an MLP, cutting the token count by `alpha`. Everything in this module
//! is about moving feature maps across that resolution boundary:
//!
//! * [`pixel_shuffle_compress`] - the standard compression path.
//! * [`self_replicate_compress`] - feeds `alpha` copies of a single pixel
//!   through the same compression MLP, so compression semantics apply
//!   without losing spatial resolution.
//! * [`scanning_compress`] - the stride-1 overlapped alternative, with
//!   clamp-to-edge windows.
//! * [`pixel_unshuffle_expand`] - the inverse placement: project a token to
//!   `alpha` chunks and scatter the chunks back into an `s x s` block.
//! * [`upsample_nearest`] - plain nearest-neighbour spatial upsampling.
//!
//! Every spatial rearrangement is a gather with a precomputed index table, so
//! the shuffle/unshuffle placement is a literal permutation that the tests
//! can compose and invert.

use std::sync::Arc;

use thiserror::Error;

use crate::autograd::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ShuffleError {
    #[error("grid {h}x{w} not divisible by stride {s}")]
    Indivisible { h: usize, w: usize, s: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ShuffleError>;

/// Shuffle geometry: spatial stride per side and the channel widths on the
/// two sides of the compression MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShuffleSpec {
    /// Spatial stride per side; the token compression factor is `s*s`.
    pub s: usize,
    /// Encoder channel width.
    pub d0: usize,
    /// LLM channel width.
    pub d: usize,
}

impl ShuffleSpec {
    pub fn new(s: usize, d0: usize, d: usize) -> ShuffleSpec {
        assert!(s >= 1);
        ShuffleSpec { s, d0, d }
    }

    /// Token compression factor `alpha = s^2`.
    pub fn alpha(&self) -> usize {
        self.s * self.s
    }
}

/// A feature map over an `h x w` token grid, stored row-major as `[h*w, dim]`.
/// Spatial index `(r, c)` lives at flat row `r*w + c`.
#[derive(Clone, Debug)]
pub struct GridFeatures {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Tensor,
}

impl GridFeatures {
    pub fn new(h: usize, w: usize, dim: usize, data: Tensor) -> Result<GridFeatures> {
        if data.shape() != [h * w, dim] {
            return Err(ShuffleError::DimMismatch {
                what: "grid features",
                expected: h * w * dim,
                got: data.numel(),
            });
        }
        Ok(GridFeatures { h, w, dim, data })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Activation of the two-layer adapter MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two-layer adapter: optional pre-normalization, linear to a hidden width,
/// activation, linear to the output width. Learned instances use
/// `norm -> linear(din -> 2*dout) -> GELU -> linear(-> dout)`; the identity
/// constructors build exact linear maps for the structural tests.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: Option<(Tensor, Tensor)>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub act: Activation,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn din(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Exact identity on `[T, d]` (used to make placement tests bit-exact).
    pub fn identity(d: usize) -> Mlp {
        Mlp {
            norm: None,
            w1: eye(d),
            b1: Tensor::zeros(&[d]),
            act: Activation::Identity,
            w2: eye(d),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Exact linear map `t -> [t; t; ...; t]` with `copies` chunks.
    pub fn copy_to_all_chunks(d: usize, copies: usize) -> Mlp {
        let mut w2 = vec![0.0; d * d * copies];
        for i in 0..d {
            for c in 0..copies {
                w2[i * d * copies + c * d + i] = 1.0;
            }
        }
        Mlp {
            norm: None,
            w1: eye(d),
            b1: Tensor::zeros(&[d]),
            act: Activation::Identity,
            w2: Tensor::new(&[d, d * copies], w2).expect("finite"),
            b2: Tensor::zeros(&[d * copies]),
        }
    }

    /// Exact linear map collapsing `[T, din]` to `[T, 1]` by summation.
    pub fn all_ones_row(din: usize) -> Mlp {
        Mlp {
            norm: None,
            w1: eye(din),
            b1: Tensor::zeros(&[din]),
            act: Activation::Identity,
            w2: Tensor::new(&[din, 1], vec![1.0; din]).expect("finite"),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// A plain linear map with explicit weights (zero bias, no norm).
    pub fn linear(w: Tensor) -> Mlp {
        let din = w.shape()[0];
        let dout = w.shape()[1];
        Mlp {
            norm: None,
            w1: eye(din),
            b1: Tensor::zeros(&[din]),
            act: Activation::Identity,
            w2: w,
            b2: Tensor::zeros(&[dout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let got = *x.shape().last().unwrap_or(&0);
        if got != self.din() {
            return Err(ShuffleError::DimMismatch {
                what: "mlp input",
                expected: self.din(),
                got,
            });
        }
        let mut h = x.clone();
        if let Some((gamma, beta)) = &self.norm {
            h = g.layernorm(&h, gamma, beta)?;
        }
        h = g.affine(&h, &self.w1, &self.b1)?;
        if self.act == Activation::Gelu {
            h = g.gelu(&h)?;
        }
        Ok(g.affine(&h, &self.w2, &self.b2)?)
    }

    /// True when both MLPs share the same underlying weight storage.
    pub fn shares_weights_with(&self, other: &Mlp) -> bool {
        self.w1.ptr_eq(&other.w1)
            && self.w2.ptr_eq(&other.w2)
            && self.b1.ptr_eq(&other.b1)
            && self.b2.ptr_eq(&other.b2)
    }
}

fn eye(d: usize) -> Tensor {
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = 1.0;
    }
    Tensor::new(&[d, d], data).expect("finite")
}

// ---- index tables ----------------------------------------------------------
//
// Each table maps output element -> source element over flattened feature
// storage, with a fixed row-major intra-block order (offset k = dr*s + dc).
// Shuffle and unshuffle use the same k, which is what makes the roundtrip an
// exact inverse.

/// Source indices building `[N1, alpha*d0]` block-concat rows from `[h*w, d0]`.
pub fn shuffle_concat_table(h: usize, w: usize, d0: usize, s: usize) -> Vec<usize> {
    let (hb, wb) = (h / s, w / s);
    let mut table = Vec::with_capacity(hb * wb * s * s * d0);
    for br in 0..hb {
        for bc in 0..wb {
            for dr in 0..s {
                for dc in 0..s {
                    let pixel = (br * s + dr) * w + (bc * s + dc);
                    for c in 0..d0 {
                        table.push(pixel * d0 + c);
                    }
                }
            }
        }
    }
    table
}

/// Source indices building `[h*w, alpha*d0]` rows of `alpha` copies per pixel.
pub fn replicate_table(h: usize, w: usize, d0: usize, s: usize) -> Vec<usize> {
    let alpha = s * s;
    let mut table = Vec::with_capacity(h * w * alpha * d0);
    for pixel in 0..h * w {
        for _ in 0..alpha {
            for c in 0..d0 {
                table.push(pixel * d0 + c);
            }
        }
    }
    table
}

/// Source indices for stride-1 `s x s` windows, clamped at the bottom/right
/// edges so every pixel owns a full window.
pub fn scanning_table(h: usize, w: usize, d0: usize, s: usize) -> Vec<usize> {
    let mut table = Vec::with_capacity(h * w * s * s * d0);
    for r in 0..h {
        for c in 0..w {
            for dr in 0..s {
                for dc in 0..s {
                    let rr = (r + dr).min(h - 1);
                    let cc = (c + dc).min(w - 1);
                    let pixel = rr * w + cc;
                    for ch in 0..d0 {
                        table.push(pixel * d0 + ch);
                    }
                }
            }
        }
    }
    table
}

/// Source indices scattering `[h*w, alpha*dp]` chunk rows to `[(s*h)*(s*w), dp]`
/// pixels; chunk `k = dr*s + dc` lands at intra-block offset `(dr, dc)` --
/// exactly inverse to [`shuffle_concat_table`].
pub fn unshuffle_place_table(h: usize, w: usize, dp: usize, s: usize) -> Vec<usize> {
    let (h2, w2) = (h * s, w * s);
    let alpha = s * s;
    let mut table = Vec::with_capacity(h2 * w2 * dp);
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            let (br, bc) = (r2 / s, c2 / s);
            let k = (r2 % s) * s + (c2 % s);
            let token = br * w + bc;
            for c in 0..dp {
                table.push(token * alpha * dp + k * dp + c);
            }
        }
    }
    table
}

/// Source indices replicating each pixel of `[h*w, d]` into an `s x s` block.
pub fn upsample_table(h: usize, w: usize, d: usize, s: usize) -> Vec<usize> {
    let (h2, w2) = (h * s, w * s);
    let mut table = Vec::with_capacity(h2 * w2 * d);
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            let pixel = (r2 / s) * w + (c2 / s);
            for c in 0..d {
                table.push(pixel * d + c);
            }
        }
    }
    table
}

fn gather_flat(
    g: &mut Graph,
    x: &Tensor,
    table: Vec<usize>,
    out_shape: &[usize],
) -> Result<Tensor> {
    let flat = g.reshape(x, &[x.numel()])?;
    let picked = g.gather(&flat, Arc::new(table))?;
    Ok(g.reshape(&picked, out_shape)?)
}

// ---- operators ---------------------------------------------------------------

/// Pixel-shuffle compression: `[h, w, d0] -> [h/s, w/s, d]`. Each output token
/// is `mlp(concat of its s x s block, row-major intra-block order)`.
pub fn pixel_shuffle_compress(
    g: &mut Graph,
    f: &GridFeatures,
    spec: &ShuffleSpec,
    mlp: &Mlp,
) -> Result<GridFeatures> {
    let s = spec.s;
    if f.h % s != 0 || f.w % s != 0 {
        return Err(ShuffleError::Indivisible { h: f.h, w: f.w, s });
    }
    check_dim("compress input channels", spec.d0, f.dim)?;
    check_dim("compress mlp input", spec.alpha() * spec.d0, mlp.din())?;
    let (hb, wb) = (f.h / s, f.w / s);
    let table = shuffle_concat_table(f.h, f.w, f.dim, s);
    let blocks = gather_flat(g, &f.data, table, &[hb * wb, spec.alpha() * f.dim])?;
    let out = mlp.forward(g, &blocks)?;
    GridFeatures::new(hb, wb, mlp.dout(), out)
}

/// Self-replication branch: `[h, w, d0] -> [h, w, d]` through the *same*
/// compression MLP, feeding `alpha` copies of each pixel where compression
/// would feed an `s x s` block. Resolution is preserved.
pub fn self_replicate_compress(
    g: &mut Graph,
    f: &GridFeatures,
    spec: &ShuffleSpec,
    mlp: &Mlp,
) -> Result<GridFeatures> {
    check_dim("replicate input channels", spec.d0, f.dim)?;
    check_dim("replicate mlp input", spec.alpha() * spec.d0, mlp.din())?;
    let table = replicate_table(f.h, f.w, f.dim, spec.s);
    let rows = gather_flat(g, &f.data, table, &[f.h * f.w, spec.alpha() * f.dim])?;
    let out = mlp.forward(g, &rows)?;
    GridFeatures::new(f.h, f.w, mlp.dout(), out)
}

/// Scanning alternative: stride-1 `s x s` windows (clamped at the edges)
/// through the shared compression MLP. Resolution is preserved; window
/// contents overlap between neighbouring outputs.
pub fn scanning_compress(
    g: &mut Graph,
    f: &GridFeatures,
    spec: &ShuffleSpec,
    mlp: &Mlp,
) -> Result<GridFeatures> {
    check_dim("scanning input channels", spec.d0, f.dim)?;
    check_dim("scanning mlp input", spec.alpha() * spec.d0, mlp.din())?;
    let table = scanning_table(f.h, f.w, f.dim, spec.s);
    let rows = gather_flat(g, &f.data, table, &[f.h * f.w, spec.alpha() * f.dim])?;
    let out = mlp.forward(g, &rows)?;
    GridFeatures::new(f.h, f.w, mlp.dout(), out)
}

/// MLP-with-pixel-unshuffle expansion: `[h, w, din] -> [s*h, s*w, dout/alpha]`.
/// `mlp_out` must emit `alpha` equal chunks; chunk `k` becomes the pixel at
/// intra-block offset `k`, inverting the compression placement.
pub fn pixel_unshuffle_expand(
    g: &mut Graph,
    f: &GridFeatures,
    spec: &ShuffleSpec,
    mlp_out: &Mlp,
) -> Result<GridFeatures> {
    check_dim("expand mlp input", f.dim, mlp_out.din())?;
    let alpha = spec.alpha();
    if mlp_out.dout() % alpha != 0 {
        return Err(ShuffleError::DimMismatch {
            what: "expand mlp output (must split into alpha chunks)",
            expected: alpha,
            got: mlp_out.dout(),
        });
    }
    let dp = mlp_out.dout() / alpha;
    let y = mlp_out.forward(g, &f.data)?;
    let table = unshuffle_place_table(f.h, f.w, dp, spec.s);
    let placed = gather_flat(g, &y, table, &[f.h * spec.s * f.w * spec.s, dp])?;
    GridFeatures::new(f.h * spec.s, f.w * spec.s, dp, placed)
}

/// Nearest-neighbour upsampling by an integer factor per side.
pub fn upsample_nearest(g: &mut Graph, f: &GridFeatures, s: usize) -> Result<GridFeatures> {
    assert!(s >= 1);
    if s == 1 {
        return Ok(f.clone());
    }
    let table = upsample_table(f.h, f.w, f.dim, s);
    let out = gather_flat(g, &f.data, table, &[f.h * s * f.w * s, f.dim])?;
    GridFeatures::new(f.h * s, f.w * s, f.dim, out)
}

/// Bilinear upsampling (clamped at the borders), expressed as one constant
/// interpolation matrix so gradients flow through the ordinary matmul path.
pub fn upsample_bilinear(g: &mut Graph, f: &GridFeatures, s: usize) -> Result<GridFeatures> {
    assert!(s >= 1);
    if s == 1 {
        return Ok(f.clone());
    }
    let (h, w) = (f.h, f.w);
    let (h2, w2) = (h * s, w * s);
    let mut weights = vec![0.0; h2 * w2 * h * w];
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            let fy = ((r2 as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((c2 as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = fy - y0 as f64;
            let wx = fx - x0 as f64;
            let row = (r2 * w2 + c2) * h * w;
            weights[row + y0 * w + x0] += (1.0 - wy) * (1.0 - wx);
            weights[row + y0 * w + x1] += (1.0 - wy) * wx;
            weights[row + y1 * w + x0] += wy * (1.0 - wx);
            weights[row + y1 * w + x1] += wy * wx;
        }
    }
    let wmat = Tensor::new(&[h2 * w2, h * w], weights)?;
    let out = g.matmul(&wmat, &f.data)?;
    GridFeatures::new(h2, w2, f.dim, out)
}

/// Which spatial upsampler the fusion formulas use. Nearest keeps block
/// correspondence and exact oracles; bilinear is available for sensitivity
/// studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

impl Upsample {
    pub fn apply(&self, g: &mut Graph, f: &GridFeatures, s: usize) -> Result<GridFeatures> {
        match self {
            Upsample::Nearest => upsample_nearest(g, f, s),
            Upsample::Bilinear => upsample_bilinear(g, f, s),
        }
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ShuffleError::DimMismatch { what, expected, got });
    }
    Ok(())
}
