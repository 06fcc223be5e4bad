//! The self-check suite behind `s1e check`: index oracles, structural
//! roundtrips, finite-difference gradient checks for every primitive and for
//! composed pipelines, attention-mask truth tables, information-flow probes,
//! and the loss hand values. Each property reports its measured margin.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autograd::{grad_check, Graph, ParamSet, Tensor};
use crate::config::RunConfig;
use crate::model::{build_attention_mask, AttnMask, MaskVariant, ModelConfig, TokenLayout, TokenRole};
use crate::seg::{self, MlpSharing, PipelineMode, PipelineSettings, Retention, SampleInput, SegPipeline};
use crate::shuffle::{self, GridFeatures, Mlp, ShuffleSpec, Upsample};

pub struct PropertyResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub struct CheckReport {
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{} {:<32} {}\n",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            ));
        }
        let (ok, total) = (
            self.results.iter().filter(|r| r.pass).count(),
            self.results.len(),
        );
        out.push_str(&format!("{ok}/{total} properties passed\n"));
        out
    }
}

/// Fault-injection hooks for the check suite.
#[derive(Default)]
pub struct CheckOptions {
    /// Corrupt the shuffle index table before the bijection check; the check
    /// must then fail and name the property.
    pub corrupt_shuffle_table: bool,
}

pub fn run_check_suite(opts: &CheckOptions) -> CheckReport {
    let mut results = Vec::new();
    results.push(index_bijection(opts.corrupt_shuffle_table));
    results.push(shuffle_roundtrip());
    results.push(constant_input_equivalence());
    results.push(scanning_corner_agreement());
    results.push(softmax_row_property());
    results.push(primitive_grad_checks());
    results.push(loss_grad_checks());
    results.push(pipeline_grad_checks());
    results.push(mask_truth_tables());
    results.push(mask_monotonicity());
    results.push(information_flow());
    results.push(loss_hand_values());
    results.push(mask_head_oracle());
    results.push(zero_residual_collapse());
    results.push(metric_hand_values());
    results.push(config_roundtrip());
    CheckReport { results }
}

fn pass(name: &'static str, detail: String) -> PropertyResult {
    PropertyResult { name, pass: true, detail }
}

fn verdict(name: &'static str, ok: bool, detail: String) -> PropertyResult {
    PropertyResult { name, pass: ok, detail }
}

/// Shuffle placement composed with unshuffle placement must be the identity
/// permutation on flat element indices.
fn index_bijection(corrupt: bool) -> PropertyResult {
    for (h, w) in [(2, 2), (4, 4), (8, 8), (4, 8)] {
        let s = 2;
        for d0 in [1usize, 3] {
            let mut fwd = shuffle::shuffle_concat_table(h, w, d0, s);
            if corrupt && fwd.len() >= 2 {
                fwd.swap(0, 1);
            }
            let back = shuffle::unshuffle_place_table(h / s, w / s, d0, s);
            // sanity: both are permutations
            let mut seen = vec![false; fwd.len()];
            for &i in &fwd {
                if std::mem::replace(&mut seen[i], true) {
                    return verdict("index_bijection", false, format!("duplicate source {i} in shuffle table"));
                }
            }
            for (i, &b) in back.iter().enumerate() {
                if fwd[b] != i {
                    return verdict(
                        "index_bijection",
                        false,
                        format!("composition broken at flat index {i} (h={h} w={w} d0={d0})"),
                    );
                }
            }
        }
    }
    pass("index_bijection", "shuffle/unshuffle tables compose to identity for h,w in {2,4,8}, s=2".into())
}

fn shuffle_roundtrip() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for &(h, w) in &[(2usize, 2usize), (4, 4), (8, 8)] {
        let d0 = 2;
        let s = 2;
        let spec = ShuffleSpec::new(s, d0, s * s * d0);
        let data: Vec<f64> = (0..h * w * d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = GridFeatures::new(h, w, d0, Tensor::new(&[h * w, d0], data.clone()).unwrap()).unwrap();
        let mut g = Graph::inference();
        let down = shuffle::pixel_shuffle_compress(&mut g, &f, &spec, &Mlp::identity(s * s * d0)).unwrap();
        let up = shuffle::pixel_unshuffle_expand(&mut g, &down, &spec, &Mlp::identity(s * s * d0)).unwrap();
        for (a, b) in up.data.data().iter().zip(&data) {
            worst = worst.max((a - b).abs());
            if a.to_bits() != b.to_bits() {
                return verdict("shuffle_roundtrip", false, format!("bit mismatch at h={h} w={w}"));
            }
        }
    }
    pass("shuffle_roundtrip", format!("bit-exact, max |diff| = {worst:e}"))
}

fn constant_input_equivalence() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let (h, w, d0, s, d) = (4, 4, 3, 2, 5);
    let spec = ShuffleSpec::new(s, d0, d);
    let pixel: Vec<f64> = (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data: Vec<f64> = (0..h * w).flat_map(|_| pixel.clone()).collect();
    let f = GridFeatures::new(h, w, d0, Tensor::new(&[h * w, d0], data).unwrap()).unwrap();
    let wmat: Vec<f64> = (0..s * s * d0 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mlp = Mlp::linear(Tensor::new(&[s * s * d0, d], wmat).unwrap());
    let mut g = Graph::inference();
    let rep = shuffle::self_replicate_compress(&mut g, &f, &spec, &mlp).unwrap();
    let comp = shuffle::pixel_shuffle_compress(&mut g, &f, &spec, &mlp).unwrap();
    let up = shuffle::upsample_nearest(&mut g, &comp, s).unwrap();
    let exact = rep.data.data() == up.data.data();
    verdict(
        "constant_input_equivalence",
        exact,
        "self-replication equals upsampled compression on constant input".into(),
    )
}

fn scanning_corner_agreement() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let (h, w, d0, s) = (4, 4, 2, 2);
    let spec = ShuffleSpec::new(s, d0, s * s * d0);
    let mlp = Mlp::identity(s * s * d0);
    let data: Vec<f64> = (0..h * w * d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = GridFeatures::new(h, w, d0, Tensor::new(&[h * w, d0], data).unwrap()).unwrap();
    let mut g = Graph::inference();
    let scan = shuffle::scanning_compress(&mut g, &f, &spec, &mlp).unwrap();
    let shuf = shuffle::pixel_shuffle_compress(&mut g, &f, &spec, &mlp).unwrap();
    let dd = s * s * d0;
    for br in 0..h / s {
        for bc in 0..w / s {
            let corner = (br * s) * w + bc * s;
            let token = br * (w / s) + bc;
            if scan.data.data()[corner * dd..(corner + 1) * dd]
                != shuf.data.data()[token * dd..(token + 1) * dd]
            {
                return verdict("scanning_corner_agreement", false, format!("block ({br},{bc}) differs"));
            }
        }
    }
    pass("scanning_corner_agreement", "stride-1 windows at block corners equal shuffle tokens".into())
}

fn softmax_row_property() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..9);
        let rows = rng.gen_range(1..5);
        let data: Vec<f64> = (0..rows * n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = Tensor::new(&[rows, n], data).unwrap();
        let mut g = Graph::inference();
        let y = g.softmax_lastdim(&x).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * n..(r + 1) * n];
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if row.iter().any(|&v| v <= 0.0) {
                return verdict("softmax_rows", false, "non-positive entry".into());
            }
        }
    }
    verdict(
        "softmax_rows",
        worst <= 1e-12,
        format!("rows sum to 1 within {worst:e} (tol 1e-12), strictly positive"),
    )
}

const GC_EPS: f64 = 1e-5;
const GC_TOL: f64 = 1e-5;

fn primitive_grad_checks() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let mut rand_t = |shape: &[usize]| -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
    };
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: Box<dyn Fn(&mut Graph, &[Tensor]) -> crate::autograd::Result<Tensor>>| -> Option<PropertyResult> {
        match grad_check(&f, &inputs, GC_EPS) {
            Ok(err) => {
                if err > worst.0 {
                    worst = (err, name);
                }
                if err > GC_TOL {
                    return Some(verdict("grad_primitives", false, format!("{name}: rel err {err:e} > {GC_TOL:e}")));
                }
                None
            }
            Err(e) => Some(verdict("grad_primitives", false, format!("{name}: {e}"))),
        }
    };

    let cases: Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Tensor]) -> crate::autograd::Result<Tensor>>)> = vec![
        ("matmul", vec![rand_t(&[3, 4]), rand_t(&[4, 2])], Box::new(|g, x| {
            let y = g.matmul(&x[0], &x[1])?;
            let s = g.sigmoid(&y)?;
            g.mean_all(&s)
        })),
        ("add_sub_scale", vec![rand_t(&[2, 3]), rand_t(&[2, 3])], Box::new(|g, x| {
            let a = g.add(&x[0], &x[1])?;
            let b = g.sub(&a, &x[1])?;
            let c = g.scale(&b, 1.7)?;
            let s = g.gelu(&c)?;
            g.sum_all(&s)
        })),
        ("reshape_permute", vec![rand_t(&[2, 6])], Box::new(|g, x| {
            let r = g.reshape(&x[0], &[3, 4])?;
            let p = g.permute(&r, &[1, 0])?;
            let s = g.sigmoid(&p)?;
            g.mean_all(&s)
        })),
        ("gather", vec![rand_t(&[5, 3])], Box::new(|g, x| {
            let picked = g.gather(&x[0], Arc::new(vec![4, 0, 0, 2]))?;
            let s = g.gelu(&picked)?;
            g.sum_all(&s)
        })),
        ("softmax_lastdim", vec![rand_t(&[3, 5])], Box::new(|g, x| {
            let y = g.softmax_lastdim(&x[0])?;
            let w = g.gelu(&y)?;
            g.sum_all(&w)
        })),
        ("layernorm", vec![rand_t(&[3, 6]), rand_t(&[6]), rand_t(&[6])], Box::new(|g, x| {
            let y = g.layernorm(&x[0], &x[1], &x[2])?;
            let s = g.sigmoid(&y)?;
            g.mean_all(&s)
        })),
        ("gelu", vec![rand_t(&[7])], Box::new(|g, x| {
            let y = g.gelu(&x[0])?;
            g.sum_all(&y)
        })),
        ("sigmoid", vec![rand_t(&[7])], Box::new(|g, x| {
            let y = g.sigmoid(&x[0])?;
            g.sum_all(&y)
        })),
        ("mean_sum_axis", vec![rand_t(&[3, 4])], Box::new(|g, x| {
            let m = g.mean_axis(&x[0], 0)?;
            let s = g.sum_axis(&m, 0)?;
            let sg = g.sigmoid(&s)?;
            g.sum_all(&sg)
        })),
        ("embedding_lookup", vec![rand_t(&[6, 4])], Box::new(|g, x| {
            let e = g.embedding_lookup(&x[0], Arc::new(vec![1, 1, 5, 0]))?;
            let s = g.gelu(&e)?;
            g.mean_all(&s)
        })),
        ("concat_split", vec![rand_t(&[2, 3]), rand_t(&[2, 2])], Box::new(|g, x| {
            let c = g.concat_lastdim(&[&x[0], &x[1]])?;
            let left = g.split_lastdim(&c, 1, 3)?;
            let s = g.sigmoid(&left)?;
            g.sum_all(&s)
        })),
    ];
    for (name, inputs, f) in cases {
        if let Some(fail) = check(name, inputs, f) {
            return fail;
        }
    }
    pass("grad_primitives", format!("max rel err {:e} ({}) <= {GC_TOL:e}", worst.0, worst.1))
}

fn loss_grad_checks() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let logits = Tensor::new(&[6], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let gt: Vec<f64> = (0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let gt_b = Arc::new(gt);
    let g1 = gt_b.clone();
    let bce = move |g: &mut Graph, x: &[Tensor]| g.bce_with_logits(&x[0], g1.clone());
    let g2 = gt_b.clone();
    let dice = move |g: &mut Graph, x: &[Tensor]| g.dice_with_logits(&x[0], g2.clone(), seg::DICE_EPS);
    let ce = |g: &mut Graph, x: &[Tensor]| {
        g.next_token_cross_entropy(&x[0], Arc::new(vec![0, 2]), Arc::new(vec![1, 0]))
    };
    let text_logits = Tensor::new(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    // sum of the three, as used by the training objective
    let g3 = gt_b.clone();
    let combined = move |g: &mut Graph, x: &[Tensor]| {
        let b = g.bce_with_logits(&x[0], g3.clone())?;
        let d = g.dice_with_logits(&x[0], g3.clone(), seg::DICE_EPS)?;
        let c = g.next_token_cross_entropy(&x[1], Arc::new(vec![0, 2]), Arc::new(vec![1, 0]))?;
        let bd = g.add(&b, &d)?;
        g.add(&bd, &c)
    };

    let mut worst = 0.0f64;
    for (name, err) in [
        ("bce", grad_check(&bce, &[logits.clone()], GC_EPS)),
        ("dice", grad_check(&dice, &[logits.clone()], GC_EPS)),
        ("text_ce", grad_check(&ce, &[text_logits.clone()], GC_EPS)),
        ("sum_of_terms", grad_check(&combined, &[logits, text_logits], GC_EPS)),
    ] {
        match err {
            Ok(e) if e <= GC_TOL => worst = worst.max(e),
            Ok(e) => return verdict("grad_losses", false, format!("{name}: rel err {e:e}")),
            Err(e) => return verdict("grad_losses", false, format!("{name}: {e}")),
        }
    }
    pass("grad_losses", format!("max rel err {worst:e} <= {GC_TOL:e}"))
}

/// Smallest full pipeline whose every parameter coordinate can be probed by
/// central differences in reasonable time.
pub fn tiny_pipeline_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        d0: 4,
        d: 8,
        enc_depth: 1,
        enc_heads: 1,
        llm_depth: 1,
        llm_heads: 1,
        vocab: 16,
        max_seq: 16,
        shuffle_s: 2,
    }
}

/// Max FD relative error over *all* parameter coordinates of a tiny pipeline
/// in the given mode.
pub fn pipeline_grad_error(mode: PipelineMode) -> f64 {
    let cfg = tiny_pipeline_config();
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let mut ps0 = ParamSet::new();
    let pipe = SegPipeline::init(&cfg, 2, &mut ps0, &mut rng).unwrap();
    let names: Vec<String> = ps0.iter_named().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor> = ps0.iter_named().map(|(_, t)| t.clone()).collect();

    let image: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gt: Vec<f64> = (0..8 * 8).map(|_| f64::from(rng.gen_bool(0.4))).collect();
    let settings = PipelineSettings {
        mode,
        retention: Retention::SelfReplicate,
        sharing: MlpSharing::Shared2,
        mask_variant: MaskVariant::ImgBidirSeg,
        upsample: Upsample::Nearest,
    };

    let program = move |g: &mut Graph, inputs: &[Tensor]| -> crate::autograd::Result<Tensor> {
        let mut ps = ParamSet::new();
        for (name, t) in names.iter().zip(inputs) {
            ps.register(name, t.clone());
        }
        let input = SampleInput {
            image: &image,
            prefix: &[1],
            suffix: &[3, 4, 5],
            answer: &[6, 2, 4],
            gt_mask: Some(&gt),
        };
        let out = pipe.forward(g, &ps, &settings, &input).expect("pipeline forward");
        let text = seg::text_ce_loss(g, &out.text_logits, &[6, 2, 4], &out.layout).expect("text loss");
        let logits = out.mask_logits.expect("segmentation forward");
        let side = out.mask_side;
        let down: Vec<f64> = crate::metrics::downsample_gt(
            &gt.iter().map(|&v| v > 0.5).collect::<Vec<bool>>(),
            8,
            side,
        )
        .iter()
        .map(|&v| f64::from(v))
        .collect();
        let bce = seg::bce_loss(g, &logits, &down).expect("bce");
        let dice = seg::dice_loss(g, &logits, &down).expect("dice");
        seg::total_loss(g, &text, &bce, &dice).map_err(|_| crate::autograd::TensorError::NonFinite { op: "total" })
    };
    grad_check(&program, &tensors, GC_EPS).unwrap()
}

fn pipeline_grad_checks() -> PropertyResult {
    let mut worst = 0.0f64;
    for mode in [PipelineMode::CompressedBaseline, PipelineMode::HrRfr, PipelineMode::FullRfa] {
        let err = pipeline_grad_error(mode);
        worst = worst.max(err);
        if err > GC_TOL {
            return verdict(
                "grad_pipelines",
                false,
                format!("{mode:?}: rel err {err:e} > {GC_TOL:e}"),
            );
        }
    }
    pass("grad_pipelines", format!("max rel err {worst:e} over baseline/refill/amplify"))
}

fn roles(spec: &str) -> TokenLayout {
    TokenLayout::new(
        spec.chars()
            .map(|c| match c {
                'T' => TokenRole::Text,
                'I' => TokenRole::Img,
                'S' => TokenRole::Seg,
                _ => TokenRole::Answer,
            })
            .collect(),
    )
    .unwrap()
}

fn mask_truth_tables() -> PropertyResult {
    // layout [T,T,I,I,I,S]: hand-enumerated tables
    let layout = roles("TTIIIS");
    let causal: Vec<Vec<u8>> = (0..6).map(|q| (0..6).map(|k| u8::from(k <= q)).collect()).collect();
    let mut img_bidir = causal.clone();
    for q in 2..5 {
        for k in 2..5 {
            img_bidir[q][k] = 1;
        }
    }
    let mut img_bidir_seg = img_bidir.clone();
    for q in 2..5 {
        img_bidir_seg[q][5] = 1;
    }
    // text keys 0,1 are already causally visible to the image span
    let img_bidir_seg_text = img_bidir_seg.clone();
    let full: Vec<Vec<u8>> = (0..6).map(|_| vec![1u8; 6]).collect();

    for (variant, want) in [
        (MaskVariant::Causal, &causal),
        (MaskVariant::ImgBidir, &img_bidir),
        (MaskVariant::ImgBidirSeg, &img_bidir_seg),
        (MaskVariant::ImgBidirSegText, &img_bidir_seg_text),
        (MaskVariant::FullBidir, &full),
    ] {
        let m = build_attention_mask(&layout, variant).unwrap();
        for q in 0..6 {
            for k in 0..6 {
                if m.at(q, k) != (want[q][k] == 1) {
                    return verdict(
                        "mask_truth_tables",
                        false,
                        format!("{variant:?} differs from hand table at ({q},{k})"),
                    );
                }
            }
        }
    }
    pass("mask_truth_tables", "all five variants match hand-enumerated tables for [T,T,I,I,I,S]".into())
}

pub fn random_layout(rng: &mut ChaCha20Rng, max_len: usize) -> TokenLayout {
    loop {
        let prefix = rng.gen_range(0..3);
        let img = rng.gen_range(1..5);
        let suffix = rng.gen_range(0..4);
        let answer = rng.gen_range(0..3);
        let mut r = Vec::new();
        r.extend(std::iter::repeat(TokenRole::Text).take(prefix));
        r.extend(std::iter::repeat(TokenRole::Img).take(img));
        r.extend(std::iter::repeat(TokenRole::Text).take(suffix));
        r.push(TokenRole::Seg);
        r.extend(std::iter::repeat(TokenRole::Answer).take(answer));
        if r.len() <= max_len {
            return TokenLayout::new(r).unwrap();
        }
    }
}

fn mask_monotonicity() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    for trial in 0..20 {
        let layout = random_layout(&mut rng, 16);
        let mut prev: Option<AttnMask> = None;
        for variant in MaskVariant::ALL {
            let m = build_attention_mask(&layout, variant).unwrap();
            for q in 0..m.len {
                for k in 0..=q {
                    if !m.at(q, k) {
                        return verdict(
                            "mask_monotonicity",
                            false,
                            format!("causal edge removed at trial {trial}, {variant:?}"),
                        );
                    }
                }
            }
            if let Some(p) = &prev {
                if p.visible.iter().zip(&m.visible).any(|(&a, &b)| a && !b) {
                    return verdict(
                        "mask_monotonicity",
                        false,
                        format!("superset chain broken before {variant:?} at trial {trial}"),
                    );
                }
            }
            prev = Some(m);
        }
    }
    pass("mask_monotonicity", "superset chain and causal preservation hold for 20 random layouts".into())
}

/// Perturbing a key that cannot reach a query (through any number of hops)
/// must leave that query's final hidden state bit-identical.
fn information_flow() -> PropertyResult {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        d0: 8,
        d: 16,
        enc_depth: 1,
        enc_heads: 2,
        llm_depth: 3,
        llm_heads: 2,
        vocab: 16,
        max_seq: 16,
        shuffle_s: 2,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let mut ps = ParamSet::new();
    let model = crate::model::ToyModel::init(&cfg, &mut ps, &mut rng).unwrap();
    let layout = roles("TIIIITSAA"); // 9 positions: text, img span, text, seg, answers
    let l = layout.len();
    let base: Vec<f64> = (0..l * cfg.d).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let mut checked = 0;
    for variant in MaskVariant::ALL {
        let mask = build_attention_mask(&layout, variant).unwrap();
        let reach = mask.reachability();
        let invisible: Vec<(usize, usize)> = (0..l)
            .flat_map(|q| (0..l).map(move |k| (q, k)))
            .filter(|&(q, k)| !reach.at(q, k))
            .collect();
        if invisible.is_empty() {
            continue; // full bidirectional reaches everything
        }
        let mut g = Graph::inference();
        let seq = Tensor::new(&[l, cfg.d], base.clone()).unwrap();
        let (hidden, _) = model.llm_forward(&mut g, &ps, &seq, &mask).unwrap();
        for probe in 0..5.min(invisible.len()) {
            let (q, k) = invisible[(probe * 7) % invisible.len()];
            let mut pert = base.clone();
            for c in 0..cfg.d {
                pert[k * cfg.d + c] += 0.31 + c as f64 * 0.07;
            }
            let seq2 = Tensor::new(&[l, cfg.d], pert).unwrap();
            let (hidden2, _) = model.llm_forward(&mut g, &ps, &seq2, &mask).unwrap();
            let row_a = &hidden.data()[q * cfg.d..(q + 1) * cfg.d];
            let row_b = &hidden2.data()[q * cfg.d..(q + 1) * cfg.d];
            if row_a != row_b {
                return verdict(
                    "information_flow",
                    false,
                    format!("{variant:?}: unreachable key {k} changed query {q}"),
                );
            }
            checked += 1;
        }
    }
    pass("information_flow", format!("{checked} unreachable (query,key) probes changed nothing, bit-exact"))
}

fn loss_hand_values() -> PropertyResult {
    let mut g = Graph::inference();
    let zeros = Tensor::new(&[4], vec![0.0; 4]).unwrap();
    let bce = seg::bce_loss(&mut g, &zeros, &[1.0, 0.0, 1.0, 0.0]).unwrap().item().unwrap();
    let ln2 = (2.0f64).ln();
    if (bce - ln2).abs() > 1e-9 {
        return verdict("loss_hand_values", false, format!("bce(0 logits) = {bce}, want ln 2"));
    }
    let hot = Tensor::new(&[4], vec![40.0; 4]).unwrap();
    let dice_perfect = seg::dice_loss(&mut g, &hot, &[1.0; 4]).unwrap().item().unwrap();
    let dice_wrong = seg::dice_loss(&mut g, &hot, &[0.0; 4]).unwrap().item().unwrap();
    if dice_perfect.abs() > 1e-12 || (dice_wrong - 0.8).abs() > 1e-12 {
        return verdict(
            "loss_hand_values",
            false,
            format!("dice hand values off: {dice_perfect}, {dice_wrong}"),
        );
    }
    let vocab = 64;
    let layout = roles("ITAA");
    let logits = Tensor::new(&[4, vocab], vec![0.0; 4 * vocab]).unwrap();
    let ce = seg::text_ce_loss(&mut g, &logits, &[1, 2], &layout).unwrap().item().unwrap();
    if (ce - (vocab as f64).ln()).abs() > 1e-9 {
        return verdict("loss_hand_values", false, format!("uniform text CE = {ce}, want ln {vocab}"));
    }
    pass(
        "loss_hand_values",
        format!(
            "bce(0)=ln2 ({:.1e}), dice 0/0.8 exact, uniform CE=ln64 ({:.1e})",
            (bce - ln2).abs(),
            (ce - (vocab as f64).ln()).abs()
        ),
    )
}

fn mask_head_oracle() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (n, d) = (256, 64);
        let img: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let segv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grid = GridFeatures::new(16, 16, d, Tensor::new(&[n, d], img.clone()).unwrap()).unwrap();
        let seg_t = Tensor::new(&[1, d], segv.clone()).unwrap();
        let mut g = Graph::inference();
        let logits = seg::predict_mask(&mut g, &grid, &seg_t).unwrap();
        for i in 0..n {
            let mut dot = 0.0;
            for c in 0..d {
                dot += img[i * d + c] * segv[c];
            }
            let want = dot / (d as f64).sqrt();
            worst = worst.max((want - logits.data()[i]).abs());
        }
    }
    verdict(
        "mask_head_oracle",
        worst <= 1e-12,
        format!("max |predict_mask - double loop| = {worst:e} (tol 1e-12)"),
    )
}

fn zero_residual_collapse() -> PropertyResult {
    let mut rng = ChaCha20Rng::seed_from_u64(20);
    let (n1, d, s) = (2usize, 3usize, 2usize);
    let n0 = n1 * s;
    let spec = ShuffleSpec::new(s, d, d);
    let rand_grid = |rng: &mut ChaCha20Rng, side: usize| {
        let data: Vec<f64> = (0..side * side * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GridFeatures::new(side, side, d, Tensor::new(&[side * side, d], data).unwrap()).unwrap()
    };
    let f_v1 = rand_grid(&mut rng, n1);
    let f_img = GridFeatures::new(n1, n1, d, f_v1.data.clone()).unwrap(); // identity LLM
    let hq = rand_grid(&mut rng, n0);
    let wdata: Vec<f64> = (0..d * s * s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tied = Mlp::linear(Tensor::new(&[d, s * s * d], wdata).unwrap());
    let bundle = seg::FeatureBundle {
        f_v0: rand_grid(&mut rng, n0),
        f_v1,
        f_v1hq: Some(hq.clone()),
        f_img,
        f_seg: Tensor::new(&[1, d], vec![0.2; d]).unwrap(),
    };
    let mlps = seg::RfaMlps { v1: tied.clone(), v1hq: tied.clone(), img: tied.clone() };
    let mut g = Graph::inference();
    let rfa = seg::residual_amplify(&mut g, &bundle, &spec, MlpSharing::Shared2, &mlps, Upsample::Nearest).unwrap();
    let want = shuffle::pixel_unshuffle_expand(&mut g, &hq, &spec, &tied).unwrap();
    if rfa.data.data() != want.data.data() {
        return verdict("zero_residual_collapse", false, "amplifier did not collapse to expanded branch".into());
    }
    let rfr = seg::residual_refill(&mut g, &bundle, &spec, Upsample::Nearest).unwrap();
    if rfr.data.data() != hq.data.data() {
        return verdict("zero_residual_collapse", false, "refill did not collapse to uncompressed branch".into());
    }
    pass("zero_residual_collapse", "identity LLM with tied expansion MLPs collapses both fusions, bit-exact".into())
}

fn metric_hand_values() -> PropertyResult {
    use crate::metrics::{aggregate, iou, IouRecord};
    let records = [
        IouRecord { intersection: 2, union: 4, iou: 0.5 },
        IouRecord { intersection: 3, union: 5, iou: 0.6 },
    ];
    let (ciou, giou) = aggregate(&records).unwrap();
    let ok = (ciou - 5.0 / 9.0).abs() < 1e-12 && (giou - 0.55).abs() < 1e-12;
    if !ok {
        return verdict("metric_hand_values", false, format!("ciou {ciou}, giou {giou}"));
    }
    let r = iou(&[true, true, false, false], &[true, true, true, true]).unwrap();
    verdict(
        "metric_hand_values",
        r.iou == 0.5,
        "cIoU 5/9, gIoU 0.55, hand-count IoU 0.5".into(),
    )
}

fn config_roundtrip() -> PropertyResult {
    let mut cfg = RunConfig::default();
    cfg.seed = 99;
    cfg.pipeline.mode = PipelineMode::HrRfr;
    match RunConfig::parse(&cfg.serialize()) {
        Ok(parsed) if parsed == cfg => pass("config_roundtrip", "parse(serialize(c)) == c".into()),
        Ok(_) => verdict("config_roundtrip", false, "roundtrip changed the config".into()),
        Err(e) => verdict("config_roundtrip", false, format!("{e}")),
    }
}
