//! Run configuration and its flat `key=value` text format.
//!
//! Keys carry section prefixes (`model.d=64`); the format is line-oriented
//! and diff-friendly, which is what ablation grids want. `serialize` always
//! writes every key in a fixed order, and `parse(serialize(c)) == c`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autograd::{OptimKind, Schedule};
use crate::model::{MaskVariant, ModelConfig};
use crate::seg::{MlpSharing, PipelineMode, PipelineSettings, Retention};
use crate::shuffle::Upsample;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            lr: 2e-3,
            steps: 2000,
            batch_size: 4,
            schedule: Schedule::Cosine,
        }
    }
}

/// Everything a training or evaluation run needs. Defaults reproduce the
/// full configuration: amplified residual fusion, the image-bidirectional +
/// image-to-seg attention mask, and the two-MLP sharing scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pipeline: PipelineSettings,
    /// Mask binarization threshold on logits.
    pub threshold: f64,
    pub optim: OptimConfig,
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            pipeline: PipelineSettings::default(),
            threshold: 0.0,
            optim: OptimConfig::default(),
            seed: 7,
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
        }
    }
}

pub fn mode_name(m: PipelineMode) -> &'static str {
    match m {
        PipelineMode::CompressedBaseline => "compressed_baseline",
        PipelineMode::HrOnly => "hr_only",
        PipelineMode::HrRfr => "hr_rfr",
        PipelineMode::PusOnly => "pus_only",
        PipelineMode::FullRfa => "full_rfa",
    }
}

pub fn mode_from_name(s: &str) -> Option<PipelineMode> {
    PipelineMode::ALL.into_iter().find(|&m| mode_name(m) == s)
}

pub fn mask_name(v: MaskVariant) -> &'static str {
    match v {
        MaskVariant::Causal => "causal",
        MaskVariant::ImgBidir => "img_bidir",
        MaskVariant::ImgBidirSeg => "img_bidir_seg",
        MaskVariant::ImgBidirSegText => "img_bidir_seg_text",
        MaskVariant::FullBidir => "full_bidir",
    }
}

pub fn mask_from_name(s: &str) -> Option<MaskVariant> {
    MaskVariant::ALL.into_iter().find(|&v| mask_name(v) == s)
}

pub fn sharing_name(s: MlpSharing) -> &'static str {
    match s {
        MlpSharing::Shared1 => "shared1",
        MlpSharing::Shared2 => "shared2",
        MlpSharing::Independent3 => "independent3",
    }
}

pub fn sharing_from_name(s: &str) -> Option<MlpSharing> {
    [MlpSharing::Shared1, MlpSharing::Shared2, MlpSharing::Independent3]
        .into_iter()
        .find(|&v| sharing_name(v) == s)
}

pub fn retention_name(r: Retention) -> &'static str {
    match r {
        Retention::SelfReplicate => "self_replicate",
        Retention::Scanning => "scanning",
    }
}

pub fn retention_from_name(s: &str) -> Option<Retention> {
    [Retention::SelfReplicate, Retention::Scanning]
        .into_iter()
        .find(|&v| retention_name(v) == s)
}

pub fn upsample_name(u: Upsample) -> &'static str {
    match u {
        Upsample::Nearest => "nearest",
        Upsample::Bilinear => "bilinear",
    }
}

pub fn upsample_from_name(s: &str) -> Option<Upsample> {
    [Upsample::Nearest, Upsample::Bilinear]
        .into_iter()
        .find(|&v| upsample_name(v) == s)
}

fn optim_name(k: OptimKind) -> &'static str {
    match k {
        OptimKind::Sgd => "sgd",
        OptimKind::Adam => "adam",
    }
}

fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Constant => "constant",
        Schedule::Cosine => "cosine",
    }
}

impl RunConfig {
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "model.image_size={}", m.image_size);
        let _ = writeln!(s, "model.patch_size={}", m.patch_size);
        let _ = writeln!(s, "model.d0={}", m.d0);
        let _ = writeln!(s, "model.d={}", m.d);
        let _ = writeln!(s, "model.enc_depth={}", m.enc_depth);
        let _ = writeln!(s, "model.enc_heads={}", m.enc_heads);
        let _ = writeln!(s, "model.llm_depth={}", m.llm_depth);
        let _ = writeln!(s, "model.llm_heads={}", m.llm_heads);
        let _ = writeln!(s, "model.vocab={}", m.vocab);
        let _ = writeln!(s, "model.max_seq={}", m.max_seq);
        let _ = writeln!(s, "model.shuffle_s={}", m.shuffle_s);
        let _ = writeln!(s, "pipeline.mode={}", mode_name(self.pipeline.mode));
        let _ = writeln!(s, "pipeline.retention={}", retention_name(self.pipeline.retention));
        let _ = writeln!(s, "pipeline.sharing={}", sharing_name(self.pipeline.sharing));
        let _ = writeln!(s, "pipeline.mask_variant={}", mask_name(self.pipeline.mask_variant));
        let _ = writeln!(s, "pipeline.upsample={}", upsample_name(self.pipeline.upsample));
        let _ = writeln!(s, "pipeline.threshold={}", self.threshold);
        let _ = writeln!(s, "optim.kind={}", optim_name(self.optim.kind));
        let _ = writeln!(s, "optim.lr={}", self.optim.lr);
        let _ = writeln!(s, "optim.steps={}", self.optim.steps);
        let _ = writeln!(s, "optim.batch_size={}", self.optim.batch_size);
        let _ = writeln!(s, "optim.schedule={}", schedule_name(self.optim.schedule));
        let _ = writeln!(s, "run.seed={}", self.seed);
        let _ = writeln!(s, "data.dir={}", self.data_dir);
        let _ = writeln!(s, "out.dir={}", self.out_dir);
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|msg| ConfigError::Parse {
                line: i + 1,
                msg,
            })?;
        }
        Ok(cfg)
    }

    /// Apply a single `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn int(v: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("bad integer {v:?}"))
        }
        fn real(v: &str) -> std::result::Result<f64, String> {
            v.parse().map_err(|_| format!("bad number {v:?}"))
        }
        match key {
            "model.image_size" => self.model.image_size = int(value)?,
            "model.patch_size" => self.model.patch_size = int(value)?,
            "model.d0" => self.model.d0 = int(value)?,
            "model.d" => self.model.d = int(value)?,
            "model.enc_depth" => self.model.enc_depth = int(value)?,
            "model.enc_heads" => self.model.enc_heads = int(value)?,
            "model.llm_depth" => self.model.llm_depth = int(value)?,
            "model.llm_heads" => self.model.llm_heads = int(value)?,
            "model.vocab" => self.model.vocab = int(value)?,
            "model.max_seq" => self.model.max_seq = int(value)?,
            "model.shuffle_s" => self.model.shuffle_s = int(value)?,
            "pipeline.mode" => {
                self.pipeline.mode =
                    mode_from_name(value).ok_or_else(|| format!("unknown pipeline mode {value:?}"))?
            }
            "pipeline.retention" => {
                self.pipeline.retention = retention_from_name(value)
                    .ok_or_else(|| format!("unknown retention {value:?}"))?
            }
            "pipeline.sharing" => {
                self.pipeline.sharing =
                    sharing_from_name(value).ok_or_else(|| format!("unknown sharing {value:?}"))?
            }
            "pipeline.mask_variant" => {
                self.pipeline.mask_variant =
                    mask_from_name(value).ok_or_else(|| format!("unknown mask variant {value:?}"))?
            }
            "pipeline.upsample" => {
                self.pipeline.upsample = upsample_from_name(value)
                    .ok_or_else(|| format!("unknown upsampler {value:?}"))?
            }
            "pipeline.threshold" => self.threshold = real(value)?,
            "optim.kind" => {
                self.optim.kind = match value {
                    "sgd" => OptimKind::Sgd,
                    "adam" => OptimKind::Adam,
                    _ => return Err(format!("unknown optimizer {value:?}")),
                }
            }
            "optim.lr" => self.optim.lr = real(value)?,
            "optim.steps" => self.optim.steps = int(value)?,
            "optim.batch_size" => self.optim.batch_size = int(value)?,
            "optim.schedule" => {
                self.optim.schedule = match value {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(format!("unknown schedule {value:?}")),
                }
            }
            "run.seed" => self.seed = value.parse().map_err(|_| format!("bad seed {value:?}"))?,
            "data.dir" => self.data_dir = value.to_string(),
            "out.dir" => self.out_dir = value.to_string(),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Stable short identifier derived from the full configuration.
    pub fn run_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn roundtrip_modified() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.mode = PipelineMode::HrRfr;
        cfg.pipeline.mask_variant = MaskVariant::Causal;
        cfg.pipeline.sharing = MlpSharing::Independent3;
        cfg.pipeline.retention = Retention::Scanning;
        cfg.pipeline.upsample = crate::shuffle::Upsample::Bilinear;
        cfg.optim.kind = OptimKind::Sgd;
        cfg.optim.lr = 0.25;
        cfg.seed = 123;
        cfg.data_dir = "elsewhere/data".into();
        let parsed = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn defaults_are_the_full_configuration() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pipeline.mode, PipelineMode::FullRfa);
        assert_eq!(cfg.pipeline.mask_variant, MaskVariant::ImgBidirSeg);
        assert_eq!(cfg.pipeline.sharing, MlpSharing::Shared2);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        assert!(RunConfig::parse("nonsense.key=1").is_err());
        assert!(RunConfig::parse("model.d=abc").is_err());
        assert!(RunConfig::parse("pipeline.mode=warp").is_err());
        // comments and blank lines are fine
        assert!(RunConfig::parse("# comment\n\nmodel.d=64\n").is_ok());
    }

    #[test]
    fn run_id_stable_and_config_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 8;
        assert_ne!(a.run_id(), b.run_id());
    }
}
