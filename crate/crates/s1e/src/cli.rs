//! Command implementations behind the `s1e` binary: dataset generation,
//! training, evaluation, ablation grids, the self-check suite, and mask
//! export. Ablation grid cells may run in parallel threads, capped by the
//! `S1E_THREADS` environment variable; each cell is internally
//! single-threaded and seeded, so results do not depend on scheduling.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::autograd::{checkpoint, CheckpointError, ParamSet};
use crate::checks::{run_check_suite, CheckOptions, CheckReport};
use crate::config::{mask_name, mode_name, retention_name, sharing_name, ConfigError, RunConfig};
use crate::data::{self, DataError, Sample};
use crate::model::MaskVariant;
use crate::seg::{MlpSharing, PipelineMode, Retention, SegPipeline};
use crate::train::{self, evaluate, run_training, EvalOutcome, TrainError, TrainOutcome};

pub const METRICS_HEADER: &str = "run_id,mode,mask_variant,seed,split,ciou,giou,miou,n_samples";

#[derive(Debug, Error)]
pub enum CliError {
    /// Usage or configuration problems (exit code 1).
    #[error("{0}")]
    Config(String),
    /// Runtime failures (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

// ---- gen ---------------------------------------------------------------------

pub struct GenOutcome {
    pub train_sha: String,
    pub test_sha: String,
    pub n_train: usize,
    pub n_test: usize,
}

/// Generate a dataset root with `train/` and `test/` splits (the test split
/// uses `seed + 1`). Returns the SHA-256 digests of the two index files.
pub fn cmd_gen(
    seed: u64,
    n: usize,
    n_test: usize,
    size: usize,
    max_objects: usize,
    out: &Path,
) -> Result<GenOutcome> {
    let train = data::generate_dataset(seed, n, size, max_objects);
    let test = data::generate_dataset(seed + 1, n_test, size, max_objects);
    let train_sha = data::write_dataset(&train, &out.join("train"), seed, size)?;
    let test_sha = data::write_dataset(&test, &out.join("test"), seed + 1, size)?;
    Ok(GenOutcome {
        train_sha,
        test_sha,
        n_train: n,
        n_test,
    })
}

// ---- dataset loading ------------------------------------------------------------

/// Load one split: `dir/<split>` when present, otherwise `dir` itself must be
/// a dataset directory.
pub fn load_split(data_dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let split_dir = data_dir.join(split);
    let dir = if split_dir.join("index.tsv").exists() {
        split_dir
    } else if data_dir.join("index.tsv").exists() {
        data_dir.to_path_buf()
    } else {
        return Err(CliError::Config(format!(
            "dataset not found: neither {} nor {} contains index.tsv",
            split_dir.display(),
            data_dir.display()
        )));
    };
    let (samples, _) = data::read_dataset(&dir)?;
    Ok(samples)
}

// ---- train -------------------------------------------------------------------

fn metrics_row(cfg: &RunConfig, split: &str, ev: &EvalOutcome) -> String {
    format!(
        "{},{},{},{},{},{:.6},{:.6},,{}\n",
        cfg.run_id(),
        mode_name(cfg.pipeline.mode),
        mask_name(cfg.pipeline.mask_variant),
        cfg.seed,
        split,
        ev.ciou,
        ev.giou,
        ev.n_samples
    )
}

fn append_metrics(path: &Path, row: &str) -> Result<()> {
    let mut text = if path.exists() {
        fs::read_to_string(path)?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    text.push_str(row);
    fs::write(path, text)?;
    Ok(())
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub eval: EvalOutcome,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Train under `cfg`, then evaluate on the test split. Writes the resolved
/// config, per-step loss log, checkpoint, and a metrics row into
/// `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let data_dir = PathBuf::from(&cfg.data_dir);
    let train_samples = load_split(&data_dir, "train")?;
    let test_samples = load_split(&data_dir, "test")?;

    let outcome = run_training(cfg, &train_samples)?;
    let eval = evaluate(&outcome.pipeline, &outcome.params, cfg, &test_samples)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.serialize())?;
    fs::write(out_dir.join("train_log.csv"), train::log_to_csv(cfg, &outcome.log))?;
    let checkpoint_path = out_dir.join("checkpoint.s1e");
    checkpoint::save(&outcome.params, &checkpoint_path)?;
    let metrics_path = out_dir.join("metrics.csv");
    append_metrics(&metrics_path, &metrics_row(cfg, "test", &eval))?;
    Ok(TrainArtifacts {
        outcome,
        eval,
        checkpoint_path,
        metrics_path,
    })
}

// ---- eval --------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalArtifacts {
    pub eval: EvalOutcome,
    pub row: String,
}

/// Evaluate a checkpoint on a dataset split; optionally dump per-sample
/// predicted masks at native and image resolution.
pub fn cmd_eval(
    ckpt: &Path,
    cfg: &RunConfig,
    split: &str,
    dump_masks: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<EvalArtifacts> {
    if !ckpt.exists() {
        return Err(CliError::Runtime(format!("checkpoint not found: {}", ckpt.display())));
    }
    let samples = load_split(Path::new(&cfg.data_dir), split)?;
    let (pipeline, params) = load_pipeline(cfg, ckpt)?;
    let eval = evaluate(&pipeline, &params, cfg, &samples)?;
    let row = metrics_row(cfg, split, &eval);
    if let Some(path) = metrics_out {
        append_metrics(path, &row)?;
    }
    if let Some(dir) = dump_masks {
        fs::create_dir_all(dir)?;
        for s in &samples {
            if s.mask.is_none() {
                continue;
            }
            let (native, native_side, full) =
                train::predict_sample_masks(&pipeline, &params, cfg, s)?;
            let to_gray = |m: &[bool]| -> Vec<u8> { m.iter().map(|&v| if v { 255 } else { 0 }).collect() };
            fs::write(
                dir.join(format!("pred_{:05}_native.pgm", s.id)),
                data::encode_pgm(native_side, native_side, &to_gray(&native)),
            )?;
            fs::write(
                dir.join(format!("pred_{:05}_full.pgm", s.id)),
                data::encode_pgm(s.side, s.side, &to_gray(&full)),
            )?;
        }
    }
    Ok(EvalArtifacts { eval, row })
}

fn load_pipeline(cfg: &RunConfig, ckpt: &Path) -> Result<(SegPipeline, ParamSet)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let pipeline = SegPipeline::init(&cfg.model, data::SEG_ID as usize, &mut ps, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    checkpoint::restore(&mut ps, ckpt)?;
    Ok((pipeline, ps))
}

// ---- ablate ------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub giou: f64,
    pub ciou: f64,
}

pub struct AblationTable {
    pub axis: String,
    pub cells: Vec<AblationCell>,
    pub variants: Vec<String>,
}

impl AblationTable {
    pub fn seed_gious(&self, variant: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.giou)
            .collect()
    }

    pub fn mean_giou(&self, variant: &str) -> f64 {
        let v = self.seed_gious(variant);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,variant,n_seeds,giou_mean,giou_sd,ciou_mean,ciou_sd\n");
        for variant in &self.variants {
            let rows: Vec<&AblationCell> = self.cells.iter().filter(|c| &c.variant == variant).collect();
            let n = rows.len() as f64;
            let gmean = rows.iter().map(|c| c.giou).sum::<f64>() / n;
            let cmean = rows.iter().map(|c| c.ciou).sum::<f64>() / n;
            let gsd = sd(rows.iter().map(|c| c.giou), gmean);
            let csd = sd(rows.iter().map(|c| c.ciou), cmean);
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                self.axis,
                variant,
                rows.len(),
                gmean,
                gsd,
                cmean,
                csd
            ));
        }
        out
    }
}

fn sd(values: impl Iterator<Item = f64>, mean: f64) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Variant list for one ablation axis: each entry is (name, config patch).
fn axis_variants(axis: &str, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match axis {
        "pipeline" => {
            for mode in PipelineMode::ALL {
                let mut cfg = base.clone();
                cfg.pipeline.mode = mode;
                out.push((mode_name(mode).to_string(), cfg));
            }
        }
        "mask" => {
            for variant in MaskVariant::ALL {
                let mut cfg = base.clone();
                cfg.pipeline.mask_variant = variant;
                out.push((mask_name(variant).to_string(), cfg));
            }
        }
        "sharing" => {
            for sharing in [MlpSharing::Shared1, MlpSharing::Shared2, MlpSharing::Independent3] {
                let mut cfg = base.clone();
                cfg.pipeline.sharing = sharing;
                out.push((sharing_name(sharing).to_string(), cfg));
            }
        }
        "retention" => {
            let mut none = base.clone();
            none.pipeline.mode = PipelineMode::CompressedBaseline;
            out.push(("none".to_string(), none));
            for retention in [Retention::SelfReplicate, Retention::Scanning] {
                let mut cfg = base.clone();
                cfg.pipeline.mode = PipelineMode::HrRfr;
                cfg.pipeline.retention = retention;
                out.push((retention_name(retention).to_string(), cfg));
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown ablation axis {other:?} (expected pipeline|mask|sharing|retention)"
            )))
        }
    }
    Ok(out)
}

/// Worker-thread cap for ablation grids.
pub fn grid_threads() -> usize {
    std::env::var("S1E_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Train and evaluate every variant on one axis across `n_seeds` seeds
/// (`base.seed + i`). All cells share the dataset and, for common modules,
/// the initial weights of their seed.
pub fn cmd_ablate(base: &RunConfig, axis: &str, n_seeds: usize, out_csv: Option<&Path>) -> Result<AblationTable> {
    let variants = axis_variants(axis, base)?;
    let data_dir = PathBuf::from(&base.data_dir);
    let train_samples = load_split(&data_dir, "train")?;
    let test_samples = load_split(&data_dir, "test")?;

    let mut jobs: Vec<(String, RunConfig)> = Vec::new();
    for (name, cfg) in &variants {
        for i in 0..n_seeds {
            let mut cell = cfg.clone();
            cell.seed = base.seed + i as u64;
            jobs.push((name.clone(), cell));
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<AblationCell>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = grid_threads().min(jobs.len().max(1));
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                if failure.lock().unwrap().is_some() {
                    break;
                }
                let (name, cfg) = &jobs[i];
                match run_training(cfg, &train_samples)
                    .and_then(|o| evaluate(&o.pipeline, &o.params, cfg, &test_samples).map(|e| (o, e)))
                {
                    Ok((_, ev)) => {
                        results.lock().unwrap()[i] = Some(AblationCell {
                            variant: name.clone(),
                            seed: cfg.seed,
                            giou: ev.giou,
                            ciou: ev.ciou,
                        });
                    }
                    Err(e) => {
                        *failure.lock().unwrap() = Some(CliError::Runtime(format!(
                            "cell {name} seed {}: {e}",
                            cfg.seed
                        )));
                    }
                }
            });
        }
    });
    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    let cells: Vec<AblationCell> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|c| c.expect("all cells finished"))
        .collect();
    let table = AblationTable {
        axis: axis.to_string(),
        cells,
        variants: variants.iter().map(|(n, _)| n.clone()).collect(),
    };
    if let Some(path) = out_csv {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, table.to_csv())?;
    }
    Ok(table)
}

// ---- check -------------------------------------------------------------------

pub fn cmd_check(corrupt_shuffle_table: bool) -> CheckReport {
    run_check_suite(&CheckOptions {
        corrupt_shuffle_table,
    })
}

// ---- dump-mask ----------------------------------------------------------------

/// Write the predicted mask for one sample id at native and image resolution.
pub fn cmd_dump_mask(
    ckpt: &Path,
    cfg: &RunConfig,
    split: &str,
    id: u32,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let samples = load_split(Path::new(&cfg.data_dir), split)?;
    let sample = samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Runtime(format!("no sample with id {id} in split {split}")))?;
    let (pipeline, params) = load_pipeline(cfg, ckpt)?;
    let (native, native_side, full) = train::predict_sample_masks(&pipeline, &params, cfg, sample)?;
    fs::create_dir_all(out)?;
    let to_gray = |m: &[bool]| -> Vec<u8> { m.iter().map(|&v| if v { 255 } else { 0 }).collect() };
    let native_path = out.join(format!("pred_{id:05}_native.pgm"));
    let full_path = out.join(format!("pred_{id:05}_full.pgm"));
    fs::write(&native_path, data::encode_pgm(native_side, native_side, &to_gray(&native)))?;
    fs::write(&full_path, data::encode_pgm(sample.side, sample.side, &to_gray(&full)))?;
    Ok((native_path, full_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(data_dir: &Path, out_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 32;
        cfg.model.patch_size = 8;
        cfg.model.d0 = 16;
        cfg.model.d = 32;
        cfg.model.enc_depth = 1;
        cfg.model.llm_depth = 2;
        cfg.optim.steps = 5;
        cfg.optim.batch_size = 2;
        cfg.data_dir = data_dir.display().to_string();
        cfg.out_dir = out_dir.display().to_string();
        cfg
    }

    #[test]
    fn gen_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ga = cmd_gen(7, 10, 3, 32, 3, a.path()).unwrap();
        let gb = cmd_gen(7, 10, 3, 32, 3, b.path()).unwrap();
        assert_eq!(ga.train_sha, gb.train_sha);
        assert_eq!(ga.test_sha, gb.test_sha);
        assert_ne!(ga.train_sha, ga.test_sha);
    }

    #[test]
    fn empty_gen_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let g = cmd_gen(3, 0, 0, 64, 4, dir.path()).unwrap();
        assert_eq!(g.n_train, 0);
        let samples = load_split(dir.path(), "train").unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn train_eval_dump_roundtrip() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        cmd_gen(5, 12, 6, 32, 3, data_dir.path()).unwrap();
        let cfg = small_cfg(data_dir.path(), out_dir.path());
        let artifacts = cmd_train(&cfg).unwrap();
        assert!(artifacts.checkpoint_path.exists());
        assert!(artifacts.metrics_path.exists());
        let metrics = fs::read_to_string(&artifacts.metrics_path).unwrap();
        assert!(metrics.starts_with(METRICS_HEADER));
        assert_eq!(metrics.lines().count(), 2);

        // eval the checkpoint we just wrote
        let dump = tempfile::tempdir().unwrap();
        let ev = cmd_eval(
            &artifacts.checkpoint_path,
            &cfg,
            "test",
            Some(dump.path()),
            None,
        )
        .unwrap();
        assert_eq!(ev.eval.n_samples, artifacts.eval.n_samples);
        assert_eq!(ev.eval.giou, artifacts.eval.giou);
        // dumped pairs exist at both resolutions
        let n_pgms = fs::read_dir(dump.path()).unwrap().count();
        assert_eq!(n_pgms, 2 * ev.eval.n_samples);

        // dump-mask for one id
        let samples = load_split(data_dir.path(), "test").unwrap();
        let seg_id = samples.iter().find(|s| s.mask.is_some()).unwrap().id;
        let single = tempfile::tempdir().unwrap();
        let (native, full) = cmd_dump_mask(&artifacts.checkpoint_path, &cfg, "test", seg_id, single.path()).unwrap();
        let (nw, nh, _) = data::decode_pgm(&fs::read(&native).unwrap(), "native").unwrap();
        let (fw, fh, _) = data::decode_pgm(&fs::read(&full).unwrap(), "full").unwrap();
        assert_eq!((nw, nh), (8, 8)); // full_rfa at 32px/8px-patch: alpha*N0 = 8x8
        assert_eq!((fw, fh), (32, 32));
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let data_dir = tempfile::tempdir().unwrap();
        cmd_gen(5, 4, 2, 32, 2, data_dir.path()).unwrap();
        let cfg = small_cfg(data_dir.path(), data_dir.path());
        let err = cmd_eval(Path::new("/nonexistent.s1e"), &cfg, "test", None, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ablation_axes_enumerate_expected_variants() {
        let cfg = RunConfig::default();
        let v = axis_variants("pipeline", &cfg).unwrap();
        assert_eq!(v.len(), 5);
        let v = axis_variants("mask", &cfg).unwrap();
        assert_eq!(v.len(), 5);
        let v = axis_variants("sharing", &cfg).unwrap();
        assert_eq!(v.len(), 3);
        let v = axis_variants("retention", &cfg).unwrap();
        assert_eq!(
            v.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            vec!["none", "self_replicate", "scanning"]
        );
        assert!(axis_variants("bogus", &cfg).is_err());
    }

    #[test]
    fn ablate_runs_a_tiny_grid() {
        let data_dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        cmd_gen(5, 8, 4, 32, 3, data_dir.path()).unwrap();
        let mut cfg = small_cfg(data_dir.path(), out.path());
        cfg.optim.steps = 2;
        let csv_path = out.path().join("grid.csv");
        let table = cmd_ablate(&cfg, "retention", 2, Some(&csv_path)).unwrap();
        assert_eq!(table.cells.len(), 6);
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 4); // header + 3 variants
    }
}
