//! Flat key=value run configuration: a config file merged with command-line
//! overrides, validated against a fixed schema before any work starts. The
//! same format serializes the effective model configuration into
//! checkpoints, so evaluation can rebuild the architecture it was trained
//! with.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageproc::PipelineConfig;
use crate::model::{ModelConfig, TokenMode};
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub kfold_k: usize,
    pub gradcam_layer: Option<String>,
    pub gradcam_class: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipe: PipelineConfig,
    /// Applied assignments, in order, for the checkpoint snapshot.
    pub applied: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            kfold_k: 5,
            gradcam_layer: None,
            gradcam_class: None,
            checkpoint: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pipe: PipelineConfig::default(),
            applied: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {:?} for key {}", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {:?} for key {}", value, key))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect()
}

/// Every accepted configuration key, for usage text and the misspelling
/// guard.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "kfold.k",
    "gradcam.layer",
    "gradcam.class",
    "checkpoint",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.plateau_factor",
    "train.plateau_patience",
    "train.early_stop_patience",
    "train.max_epochs",
    "train.batch_size",
    "train.seed",
    "train.class_weighting",
    "train.improvement_tol",
    "model.classes",
    "model.input_hw",
    "model.feature_dim",
    "model.stem_widths",
    "model.stem_strides",
    "model.mbconv_expansion",
    "model.cbam_reduction",
    "model.cnn_dropout",
    "model.patch",
    "model.embed_dim",
    "model.heads",
    "model.vit_depth",
    "model.vit_ffn_dim",
    "model.vit_dropout",
    "model.conf_depth",
    "model.conf_ffn_dim",
    "model.conf_conv_kernel",
    "model.conf_dropout",
    "model.fusion_heads",
    "model.token_mode",
    "model.head_widths",
    "model.head_dropout",
    "model.bn_momentum",
    "model.freeze",
    "pipe.gaussian",
    "pipe.sigma",
    "pipe.radius",
    "pipe.deskew",
    "pipe.dilate",
    "pipe.dilate_kernel",
    "pipe.resize",
    "pipe.target",
];

impl RunConfig {
    /// Applies one `key=value` assignment; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "kfold.k" => self.kfold_k = parse(key, value)?,
            "gradcam.layer" => self.gradcam_layer = Some(value.to_string()),
            "gradcam.class" => self.gradcam_class = Some(parse(key, value)?),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.eps" => self.train.eps = parse(key, value)?,
            "train.plateau_factor" => self.train.plateau_factor = parse(key, value)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, value)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.class_weighting" => self.train.class_weighting = parse_bool(key, value)?,
            "train.improvement_tol" => self.train.improvement_tol = parse(key, value)?,
            "model.classes" => self.model.classes = parse(key, value)?,
            "model.input_hw" => self.model.input_hw = parse(key, value)?,
            "model.feature_dim" => self.model.feature_dim = parse(key, value)?,
            "model.stem_widths" => self.model.stem_widths = parse_list(key, value)?,
            "model.stem_strides" => self.model.stem_strides = parse_list(key, value)?,
            "model.mbconv_expansion" => self.model.mbconv_expansion = parse(key, value)?,
            "model.cbam_reduction" => self.model.cbam_reduction = parse(key, value)?,
            "model.cnn_dropout" => self.model.cnn_dropout = parse(key, value)?,
            "model.patch" => self.model.patch = parse(key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.vit_depth" => self.model.vit_depth = parse(key, value)?,
            "model.vit_ffn_dim" => self.model.vit_ffn_dim = parse(key, value)?,
            "model.vit_dropout" => self.model.vit_dropout = parse(key, value)?,
            "model.conf_depth" => self.model.conf_depth = parse(key, value)?,
            "model.conf_ffn_dim" => self.model.conf_ffn_dim = parse(key, value)?,
            "model.conf_conv_kernel" => self.model.conf_conv_kernel = parse(key, value)?,
            "model.conf_dropout" => self.model.conf_dropout = parse(key, value)?,
            "model.fusion_heads" => self.model.fusion_heads = parse(key, value)?,
            "model.token_mode" => {
                self.model.token_mode = match value {
                    "single" => TokenMode::Single,
                    "reshaped" => TokenMode::Reshaped,
                    _ => {
                        return Err(Error::Config(format!(
                            "model.token_mode must be single or reshaped, got {:?}",
                            value
                        )))
                    }
                }
            }
            "model.head_widths" => self.model.head_widths = parse_list(key, value)?,
            "model.head_dropout" => self.model.head_dropout = parse(key, value)?,
            "model.bn_momentum" => self.model.bn_momentum = parse(key, value)?,
            "model.freeze" => {
                self.model.freeze = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| s.trim().to_string()).collect()
                }
            }
            "pipe.gaussian" => self.pipe.gaussian = parse_bool(key, value)?,
            "pipe.sigma" => self.pipe.sigma = parse(key, value)?,
            "pipe.radius" => self.pipe.radius = parse(key, value)?,
            "pipe.deskew" => self.pipe.deskew = parse_bool(key, value)?,
            "pipe.dilate" => self.pipe.dilate = parse_bool(key, value)?,
            "pipe.dilate_kernel" => self.pipe.dilate_kernel = parse(key, value)?,
            "pipe.resize" => self.pipe.resize = parse_bool(key, value)?,
            "pipe.target" => {
                let t: usize = parse(key, value)?;
                self.pipe.target_height = t;
                self.pipe.target_width = t;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key {:?} (known keys: {})",
                    key,
                    KNOWN_KEYS.join(", ")
                )))
            }
        }
        self.applied.push(format!("{}={}", key, value));
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value, got {:?}", path.display(), ln + 1, raw))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical dump of the model architecture (with class count) for the
    /// checkpoint snapshot.
    pub fn model_snapshot(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("model.classes={}", m.classes),
            format!("model.input_hw={}", m.input_hw),
            format!("model.feature_dim={}", m.feature_dim),
            format!("model.stem_widths={}", list(&m.stem_widths)),
            format!("model.stem_strides={}", list(&m.stem_strides)),
            format!("model.mbconv_expansion={}", m.mbconv_expansion),
            format!("model.cbam_reduction={}", m.cbam_reduction),
            format!("model.cnn_dropout={}", m.cnn_dropout),
            format!("model.patch={}", m.patch),
            format!("model.embed_dim={}", m.embed_dim),
            format!("model.heads={}", m.heads),
            format!("model.vit_depth={}", m.vit_depth),
            format!("model.vit_ffn_dim={}", m.vit_ffn_dim),
            format!("model.vit_dropout={}", m.vit_dropout),
            format!("model.conf_depth={}", m.conf_depth),
            format!("model.conf_ffn_dim={}", m.conf_ffn_dim),
            format!("model.conf_conv_kernel={}", m.conf_conv_kernel),
            format!("model.conf_dropout={}", m.conf_dropout),
            format!("model.fusion_heads={}", m.fusion_heads),
            format!(
                "model.token_mode={}",
                match m.token_mode {
                    TokenMode::Single => "single",
                    TokenMode::Reshaped => "reshaped",
                }
            ),
            format!("model.head_widths={}", list(&m.head_widths)),
            format!("model.head_dropout={}", m.head_dropout),
            format!("model.bn_momentum={}", m.bn_momentum),
        ];
        if !m.freeze.is_empty() {
            lines.push(format!("model.freeze={}", m.freeze.join(",")));
        }
        lines.join("\n")
    }

    /// Rebuilds a model configuration from a checkpoint snapshot.
    pub fn model_from_snapshot(snapshot: &str) -> Result<ModelConfig> {
        let mut rc = RunConfig::default();
        for line in snapshot.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad snapshot line {:?}", line)))?;
            rc.apply(key, value)?;
        }
        Ok(rc.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut rc = RunConfig::default();
        let err = rc.apply("train.lerning_rate", "0.001").unwrap_err().to_string();
        assert!(err.contains("unknown configuration key"), "{}", err);
    }

    #[test]
    fn overrides_update_nested_configs() {
        let mut rc = RunConfig::default();
        rc.apply("train.lr", "0.001").unwrap();
        rc.apply("model.stem_widths", "8,16").unwrap();
        rc.apply("pipe.deskew", "false").unwrap();
        rc.apply("seed", "7").unwrap();
        assert_eq!(rc.train.lr, 0.001);
        assert_eq!(rc.model.stem_widths, vec![8, 16]);
        assert!(!rc.pipe.deskew);
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.train.seed, 7);
        assert_eq!(rc.applied.len(), 4);
    }

    #[test]
    fn config_file_parses_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\ntrain.lr = 0.002\n\nmodel.heads=2 # inline\n").unwrap();
        let mut rc = RunConfig::default();
        rc.apply_file(&p).unwrap();
        assert_eq!(rc.train.lr, 0.002);
        assert_eq!(rc.model.heads, 2);

        std::fs::write(&p, "not-an-assignment\n").unwrap();
        let mut rc = RunConfig::default();
        assert!(rc.apply_file(&p).is_err());
    }

    #[test]
    fn model_snapshot_round_trips() {
        let mut rc = RunConfig::default();
        rc.apply("model.embed_dim", "16").unwrap();
        rc.apply("model.heads", "2").unwrap();
        rc.apply("model.classes", "11").unwrap();
        rc.apply("model.token_mode", "reshaped").unwrap();
        let snap = rc.model_snapshot();
        let rebuilt = RunConfig::model_from_snapshot(&snap).unwrap();
        assert_eq!(rebuilt.embed_dim, 16);
        assert_eq!(rebuilt.heads, 2);
        assert_eq!(rebuilt.classes, 11);
        assert_eq!(rebuilt.token_mode, TokenMode::Reshaped);
        assert_eq!(rebuilt.stem_widths, rc.model.stem_widths);
    }
}
