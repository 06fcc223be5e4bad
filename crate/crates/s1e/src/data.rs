//! Procedural referring-segmentation corpus.
//!
//! Scenes are colored geometric shapes on a dark canvas; each segmentation
//! sample pairs an image with a tokenized referring expression that uniquely
//! identifies one object, plus that object's exact visible-pixel mask. A
//! small fraction of samples are text-only VQA items ("what color is the
//! circle?") so the text loss stays exercised during mixed training.
//!
//! Expressions climb a minimal-disambiguation ladder: color alone
//! ("the red one"), color+shape ("the red circle"), then color+shape+region
//! ("the red circle at the left"). Scene generation biases later objects
//! toward sharing the color (and sometimes the shape) of earlier ones, so
//! the deeper rungs actually occur and the referent requires attribute
//! conjunction rather than a single cue.
//!
//! On-disk format per dataset directory:
//! * `index.tsv` - columns `id`, image file, mask file (`-` when absent),
//!   space-separated expression token ids, space-separated answer token ids.
//! * images as binary PPM (P6, maxval 255), masks as binary PGM (P5, 0/255).
//! * `meta.txt` - `key: value` lines with keys `format_version`, `seed`,
//!   `image_size`, `n_samples`, `vocab` (comma-separated tokens).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const VOCAB_SIZE: usize = 64;

/// Fraction of samples that are text-only VQA items (1 in 10).
pub const VQA_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no attribute subset uniquely identifies any visible object")]
    NoUniqueReferent,
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format version mismatch: found {found}, expected {expected}")]
    FormatVersionMismatch { found: String, expected: u32 },
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

// ---- vocabulary ------------------------------------------------------------

const BASE_TOKENS: [&str; 32] = [
    "<pad>", "<bos>", "[SEG]", "?", ".", "the", "it", "is", "what", "color", "segment", "in",
    "this", "image", "one", "at", "on", "please", "red", "green", "blue", "yellow", "circle",
    "square", "triangle", "small", "large", "left", "right", "top", "bottom", "center",
];

/// The fixed 64-token vocabulary (template words, attributes, specials,
/// padding slots).
pub fn vocab_tokens() -> Vec<String> {
    let mut v: Vec<String> = BASE_TOKENS.iter().map(|s| s.to_string()).collect();
    for i in v.len()..VOCAB_SIZE {
        v.push(format!("<unk{i}>"));
    }
    v
}

pub fn token_id(tok: &str) -> Option<u16> {
    BASE_TOKENS.iter().position(|t| *t == tok).map(|i| i as u16)
}

fn tid(tok: &str) -> u16 {
    token_id(tok).expect("token in vocabulary")
}

pub const PAD_ID: u16 = 0;
pub const BOS_ID: u16 = 1;
pub const SEG_ID: u16 = 2;

// ---- scene geometry ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            ColorName::Red => [214, 40, 40],
            ColorName::Green => [70, 180, 70],
            ColorName::Blue => [58, 112, 214],
            ColorName::Yellow => [230, 200, 50],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionName {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

impl RegionName {
    pub fn word(&self) -> &'static str {
        match self {
            RegionName::Left => "left",
            RegionName::Right => "right",
            RegionName::Top => "top",
            RegionName::Bottom => "bottom",
            RegionName::Center => "center",
        }
    }
}

const BG: [u8; 3] = [28, 28, 32];

/// Exact analytic geometry of one object; the stored masks are center-point
/// rasterizations of these inside-tests.
#[derive(Clone, Copy, Debug)]
pub enum Geometry {
    Circle { cx: f64, cy: f64, r: f64 },
    /// Integer-aligned axis-parallel rectangle `[x0, x0+w) x [y0, y0+h)`.
    Square { x0: i64, y0: i64, w: i64, h: i64 },
    /// Apex-up isoceles triangle with its base on an integer scanline.
    Triangle { cx: f64, base_y: f64, half_w: f64, height: f64 },
}

impl Geometry {
    /// Inside-test at continuous image coordinates.
    pub fn inside(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Circle { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Geometry::Square { x0, y0, w, h } => {
                x >= x0 as f64 && x < (x0 + w) as f64 && y >= y0 as f64 && y < (y0 + h) as f64
            }
            Geometry::Triangle { cx, base_y, half_w, height } => {
                let t = (base_y - y) / height;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= half_w * (1.0 - t)
            }
        }
    }

    /// Rasterize by pixel-center tests into an `h x h` boolean grid.
    pub fn rasterize(&self, side: usize) -> Vec<bool> {
        let mut out = vec![false; side * side];
        for py in 0..side {
            for px in 0..side {
                out[py * side + px] = self.inside(px as f64 + 0.5, py as f64 + 0.5);
            }
        }
        out
    }

    pub fn area(&self) -> f64 {
        match *self {
            Geometry::Circle { r, .. } => std::f64::consts::PI * r * r,
            Geometry::Square { w, h, .. } => (w * h) as f64,
            Geometry::Triangle { half_w, height, .. } => half_w * height,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub size: SizeClass,
    pub region: RegionName,
    pub geom: Geometry,
    /// Visible pixels after occlusion by later objects.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub side: usize,
    /// RGB canvas, row-major.
    pub canvas: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

fn region_center_range(region: RegionName, side: f64) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
    // Zones in fractions of the canvas; mid band keeps left/right labels
    // unambiguous for top/bottom and vice versa.
    let lo = side * 0.30;
    let hi = side * 0.70;
    let near = side * 0.08;
    let far = side - near;
    let band_lo = side * 0.34;
    let band_hi = side * 0.66;
    match region {
        RegionName::Left => (near..lo, band_lo..band_hi),
        RegionName::Right => (hi..far, band_lo..band_hi),
        RegionName::Top => (band_lo..band_hi, near..lo),
        RegionName::Bottom => (band_lo..band_hi, hi..far),
        RegionName::Center => (side * 0.42..side * 0.58, side * 0.42..side * 0.58),
    }
}

fn sample_range<R: Rng>(rng: &mut R, range: std::ops::Range<f64>) -> f64 {
    if range.end <= range.start {
        return range.start;
    }
    rng.gen_range(range)
}

const COLORS: [ColorName; 4] = [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];
const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
const REGIONS: [RegionName; 5] = [
    RegionName::Left,
    RegionName::Right,
    RegionName::Top,
    RegionName::Bottom,
    RegionName::Center,
];

/// Deterministic scene from a seed. Object count is uniform in
/// `[1, max_objects]`; later objects are biased toward sharing attributes
/// with earlier ones so expressions need conjunctions.
pub fn generate_scene(seed: u64, side: usize, max_objects: usize) -> Scene {
    assert!(side >= 16, "canvas must be at least 16 pixels");
    assert!((1..=6).contains(&max_objects));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_objects = rng.gen_range(1..=max_objects);
    let scale = side as f64 / 64.0;

    let mut picked: Vec<(ShapeKind, ColorName, SizeClass, RegionName)> = Vec::new();
    for i in 0..n_objects {
        let mut color = COLORS[rng.gen_range(0..COLORS.len())];
        let mut shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        if i > 0 && rng.gen_bool(0.5) {
            let donor = picked[rng.gen_range(0..picked.len())];
            color = donor.1;
            if rng.gen_bool(0.5) {
                shape = donor.0;
            }
        }
        let size = if rng.gen_bool(0.4) { SizeClass::Small } else { SizeClass::Large };
        // regions without replacement while available, so same-color-same-shape
        // pairs stay separable by position
        let used: Vec<RegionName> = picked.iter().map(|p| p.3).collect();
        let free: Vec<RegionName> = REGIONS.iter().copied().filter(|r| !used.contains(r)).collect();
        let region = if free.is_empty() {
            REGIONS[rng.gen_range(0..REGIONS.len())]
        } else {
            free[rng.gen_range(0..free.len())]
        };
        picked.push((shape, color, size, region));
    }

    let mut objects = Vec::with_capacity(n_objects);
    for &(shape, color, size, region) in &picked {
        let r = match size {
            SizeClass::Small => rng.gen_range(6.0..9.0) * scale,
            SizeClass::Large => rng.gen_range(12.0..18.0) * scale,
        };
        let (xr, yr) = region_center_range(region, side as f64);
        let cx = sample_range(&mut rng, xr);
        let cy = sample_range(&mut rng, yr);
        let geom = match shape {
            ShapeKind::Circle => Geometry::Circle { cx, cy, r },
            ShapeKind::Square => {
                let w = (2.0 * r).round() as i64;
                let h = (2.0 * r * rng.gen_range(0.75..1.25)).round() as i64;
                Geometry::Square {
                    x0: (cx - w as f64 / 2.0).round() as i64,
                    y0: (cy - h as f64 / 2.0).round() as i64,
                    w,
                    h,
                }
            }
            ShapeKind::Triangle => Geometry::Triangle {
                cx,
                base_y: (cy + r).floor(),
                half_w: r,
                height: 2.0 * r,
            },
        };
        objects.push(SceneObject {
            shape,
            color,
            size,
            region,
            geom,
            visible: Vec::new(),
        });
    }

    // rasterize with later-object occlusion
    let rasters: Vec<Vec<bool>> = objects.iter().map(|o| o.geom.rasterize(side)).collect();
    let mut canvas = vec![0u8; side * side * 3];
    for p in 0..side * side {
        canvas[p * 3..p * 3 + 3].copy_from_slice(&BG);
    }
    for (i, obj) in objects.iter_mut().enumerate() {
        let mut visible = rasters[i].clone();
        for later in rasters.iter().skip(i + 1) {
            for (v, &occ) in visible.iter_mut().zip(later) {
                *v = *v && !occ;
            }
        }
        let rgb = obj.color.rgb();
        for (p, &v) in visible.iter().enumerate() {
            if v {
                canvas[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            }
        }
        obj.visible = visible;
    }
    Scene {
        side,
        canvas,
        objects,
    }
}

// ---- referring expressions --------------------------------------------------

/// Attributes actually mentioned by an expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Referent {
    pub color: ColorName,
    pub shape: Option<ShapeKind>,
    pub region: Option<RegionName>,
}

impl Referent {
    pub fn matches(&self, obj: &SceneObject) -> bool {
        obj.color == self.color
            && self.shape.map_or(true, |s| obj.shape == s)
            && self.region.map_or(true, |r| obj.region == r)
    }

    /// Token sequence: "the red one" / "the red circle" /
    /// "the red circle at the left".
    pub fn tokens(&self) -> Vec<u16> {
        let mut toks = vec![tid("the"), tid(self.color.word())];
        match self.shape {
            Some(s) => toks.push(tid(s.word())),
            None => toks.push(tid("one")),
        }
        if let Some(r) = self.region {
            toks.extend([tid("at"), tid("the"), tid(r.word())]);
        }
        toks
    }
}

/// Minimal attribute set (color, then +shape, then +region) that uniquely
/// identifies `target` in the scene, or `None` if no rung disambiguates.
pub fn minimal_referent(scene: &Scene, target: usize) -> Option<Referent> {
    let obj = &scene.objects[target];
    let rungs = [
        Referent { color: obj.color, shape: None, region: None },
        Referent { color: obj.color, shape: Some(obj.shape), region: None },
        Referent { color: obj.color, shape: Some(obj.shape), region: Some(obj.region) },
    ];
    rungs
        .into_iter()
        .find(|r| scene.objects.iter().filter(|o| r.matches(o)).count() == 1)
}

/// A finished training/eval sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u32,
    pub side: usize,
    pub image: Vec<u8>,
    /// Question token ids (fed after the image span).
    pub expression: Vec<u16>,
    pub answer: Vec<u16>,
    /// Visible-pixel ground truth; `None` on text-only VQA samples.
    pub mask: Option<Vec<bool>>,
}

fn min_visible_pixels(side: usize) -> usize {
    ((side * side) as f64 * 0.003).ceil() as usize // 12 px at 64x64
}

/// Turn a scene into a referring sample: pick a visible, uniquely-describable
/// target (deterministically via `rng_seed`) and tokenize the minimal
/// expression. Errors with [`DataError::NoUniqueReferent`] when every object
/// is indistinguishable or hidden; callers regenerate the scene.
pub fn make_referring_sample(scene: &Scene, rng_seed: u64) -> Result<(Referent, usize, Vec<u16>, Vec<u16>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let min_vis = min_visible_pixels(scene.side);
    let mut candidates: Vec<(usize, Referent)> = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        if obj.visible.iter().filter(|&&v| v).count() < min_vis {
            continue;
        }
        if let Some(r) = minimal_referent(scene, i) {
            candidates.push((i, r));
        }
    }
    if candidates.is_empty() {
        return Err(DataError::NoUniqueReferent);
    }
    let (target, referent) = candidates[rng.gen_range(0..candidates.len())].clone();
    // "segment the red circle ."
    let mut expr = vec![tid("segment")];
    expr.extend(referent.tokens());
    expr.push(tid("."));
    // "it is [SEG] ."
    let answer = vec![tid("it"), tid("is"), SEG_ID, tid(".")];
    Ok((referent, target, expr, answer))
}

/// Try to build a VQA color question about a shape that occurs exactly once.
fn make_vqa_sample(scene: &Scene) -> Option<(Vec<u16>, Vec<u16>)> {
    let min_vis = min_visible_pixels(scene.side);
    for shape in SHAPES {
        let with_shape: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.shape == shape).collect();
        if with_shape.len() == 1 && with_shape[0].visible.iter().filter(|&&v| v).count() >= min_vis {
            // "what color is the circle ?" -> "it is red ."
            let expr = vec![tid("what"), tid("color"), tid("is"), tid("the"), tid(shape.word()), tid("?")];
            let answer = vec![tid("it"), tid("is"), tid(with_shape[0].color.word()), tid(".")];
            return Some((expr, answer));
        }
    }
    None
}

/// Deterministic corpus of `n` samples; roughly one in [`VQA_EVERY`] is a
/// text-only VQA item.
pub fn generate_dataset(seed: u64, n: usize, side: usize, max_objects: usize) -> Vec<Sample> {
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let want_vqa = (i + 1) % VQA_EVERY == 0;
        let mut attempt = 0u64;
        let sample = loop {
            let scene_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((i as u64) << 20)
                .wrapping_add(attempt);
            let scene = generate_scene(scene_seed, side, max_objects);
            if want_vqa {
                if let Some((expr, answer)) = make_vqa_sample(&scene) {
                    break Sample {
                        id: i as u32,
                        side,
                        image: scene.canvas.clone(),
                        expression: expr,
                        answer,
                        mask: None,
                    };
                }
            } else if let Ok((_, target, expr, answer)) = make_referring_sample(&scene, scene_seed ^ 0x5EED) {
                break Sample {
                    id: i as u32,
                    side,
                    image: scene.canvas.clone(),
                    expression: expr,
                    answer,
                    mask: Some(scene.objects[target].visible.clone()),
                };
            }
            attempt += 1;
            assert!(attempt < 64, "scene generation failed to converge");
        };
        samples.push(sample);
    }
    samples
}

// ---- PPM / PGM codecs --------------------------------------------------------

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), w * h * 3);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

fn decode_pnm(bytes: &[u8], magic: &str, channels: usize, file: &str) -> Result<(usize, usize, Vec<u8>)> {
    let err = |msg: &str| DataError::Parse {
        file: file.to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err(&format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let field = std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?;
        fields.push(field.parse::<usize>().map_err(|_| err("bad header integer"))?);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("maxval must be 255"));
    }
    let need = w * h * channels;
    if bytes.len() - pos != need {
        return Err(err(&format!("expected {need} payload bytes, found {}", bytes.len() - pos)));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode_pnm(bytes, "P6", 3, file)
}

pub fn decode_pgm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<u8>)> {
    decode_pnm(bytes, "P5", 1, file)
}

// ---- dataset directory io ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub image_size: usize,
    pub n_samples: usize,
    pub vocab: Vec<String>,
}

fn ids_to_str(ids: &[u16]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

fn ids_from_str(s: &str, file: &str, line: usize) -> Result<Vec<u16>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|tok| {
            tok.parse::<u16>().map_err(|_| DataError::Parse {
                file: file.to_string(),
                line,
                msg: format!("bad token id {tok:?}"),
            })
        })
        .collect()
}

/// Write a dataset directory; returns the SHA-256 hex digest of `index.tsv`.
pub fn write_dataset(samples: &[Sample], dir: &Path, seed: u64, side: usize) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for s in samples {
        let img_name = format!("img_{:05}.ppm", s.id);
        fs::write(dir.join(&img_name), encode_ppm(s.side, s.side, &s.image))?;
        let mask_name = match &s.mask {
            Some(mask) => {
                let name = format!("msk_{:05}.pgm", s.id);
                let gray: Vec<u8> = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
                fs::write(dir.join(&name), encode_pgm(s.side, s.side, &gray))?;
                name
            }
            None => "-".to_string(),
        };
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.id,
            img_name,
            mask_name,
            ids_to_str(&s.expression),
            ids_to_str(&s.answer)
        ));
    }
    fs::write(dir.join("index.tsv"), index.as_bytes())?;

    let mut meta = String::new();
    meta.push_str(&format!("format_version: {FORMAT_VERSION}\n"));
    meta.push_str(&format!("seed: {seed}\n"));
    meta.push_str(&format!("image_size: {side}\n"));
    meta.push_str(&format!("n_samples: {}\n", samples.len()));
    meta.push_str(&format!("vocab: {}\n", vocab_tokens().join(",")));
    let mut f = fs::File::create(dir.join("meta.txt"))?;
    f.write_all(meta.as_bytes())?;

    let mut hasher = Sha256::new();
    hasher.update(index.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetMeta)> {
    let meta_path = dir.join("meta.txt");
    let meta_text = fs::read_to_string(&meta_path)?;
    let mut seed = None;
    let mut image_size = None;
    let mut n_samples = None;
    let mut vocab = Vec::new();
    for (ln, line) in meta_text.lines().enumerate() {
        let (key, value) = line.split_once(": ").ok_or_else(|| DataError::Parse {
            file: "meta.txt".into(),
            line: ln + 1,
            msg: "expected `key: value`".into(),
        })?;
        match key {
            "format_version" => {
                if value != FORMAT_VERSION.to_string() {
                    return Err(DataError::FormatVersionMismatch {
                        found: value.to_string(),
                        expected: FORMAT_VERSION,
                    });
                }
            }
            "seed" => seed = value.parse().ok(),
            "image_size" => image_size = value.parse().ok(),
            "n_samples" => n_samples = value.parse().ok(),
            "vocab" => vocab = value.split(',').map(|s| s.to_string()).collect(),
            _ => {}
        }
    }
    let meta = DatasetMeta {
        seed: seed.ok_or_else(|| DataError::Parse {
            file: "meta.txt".into(),
            line: 0,
            msg: "missing seed".into(),
        })?,
        image_size: image_size.ok_or_else(|| DataError::Parse {
            file: "meta.txt".into(),
            line: 0,
            msg: "missing image_size".into(),
        })?,
        n_samples: n_samples.ok_or_else(|| DataError::Parse {
            file: "meta.txt".into(),
            line: 0,
            msg: "missing n_samples".into(),
        })?,
        vocab,
    };

    let index_text = fs::read_to_string(dir.join("index.tsv"))?;
    let mut samples = Vec::new();
    for (ln, line) in index_text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(DataError::Parse {
                file: "index.tsv".into(),
                line: ln + 1,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let id: u32 = cols[0].parse().map_err(|_| DataError::Parse {
            file: "index.tsv".into(),
            line: ln + 1,
            msg: format!("bad id {:?}", cols[0]),
        })?;
        let img_bytes = fs::read(dir.join(cols[1]))?;
        let (w, h, image) = decode_ppm(&img_bytes, cols[1])?;
        if w != h || w != meta.image_size {
            return Err(DataError::Parse {
                file: cols[1].into(),
                line: 1,
                msg: format!("image is {w}x{h}, expected {0}x{0}", meta.image_size),
            });
        }
        let mask = if cols[2] == "-" {
            None
        } else {
            let mask_bytes = fs::read(dir.join(cols[2]))?;
            let (mw, mh, gray) = decode_pgm(&mask_bytes, cols[2])?;
            if mw != w || mh != h {
                return Err(DataError::Parse {
                    file: cols[2].into(),
                    line: 1,
                    msg: format!("mask is {mw}x{mh}, expected {w}x{h}"),
                });
            }
            Some(gray.iter().map(|&v| v >= 128).collect())
        };
        samples.push(Sample {
            id,
            side: w,
            image,
            expression: ids_from_str(cols[3], "index.tsv", ln + 1)?,
            answer: ids_from_str(cols[4], "index.tsv", ln + 1)?,
            mask,
        });
    }
    Ok((samples, meta))
}

/// Image bytes to `[0,1]` floats for the encoder.
pub fn image_to_f64(image: &[u8]) -> Vec<f64> {
    image.iter().map(|&v| v as f64 / 255.0).collect()
}

pub fn mask_to_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&v| f64::from(v)).collect()
}
