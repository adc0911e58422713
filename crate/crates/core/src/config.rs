//! Run configuration: a JSON document merged over defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SkeletonSpec;
use crate::error::{Error, Result};
use crate::model::{Fusion, Layout, ModelConfig};
use crate::training::{FinetuneOptions, MaskOptions, PretrainMode, PretrainOptions, StageOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub pme_layers: usize,
    pub fmp_layers: usize,
    pub fusion: Fusion,
    pub layout: Layout,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            channels: m.channels,
            heads: m.heads,
            head_dim: m.head_dim,
            pme_layers: m.pme_layers,
            fmp_layers: m.fmp_layers,
            fusion: m.fusion,
            layout: m.layout,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skeleton {
    #[default]
    Humanoid,
    StickFigure,
}

impl Skeleton {
    pub fn spec(self) -> SkeletonSpec {
        match self {
            Skeleton::Humanoid => SkeletonSpec::humanoid(),
            Skeleton::StickFigure => SkeletonSpec::stick_figure(),
        }
    }
}

/// Synthetic dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub skeleton: Skeleton,
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub fps: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            skeleton: Skeleton::Humanoid,
            classes: 4,
            per_class: 8,
            frames: 100,
            fps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `index.json`.
    pub dir: Option<PathBuf>,
    pub fps: u32,
    pub past_frames: usize,
    pub future_frames: usize,
    pub stride: usize,
    /// Window stride on the test split; defaults to `future_frames`.
    pub eval_stride: Option<usize>,
    pub center_on_root: bool,
    /// Root joint used for centering.
    pub root_joint: usize,
    /// Every `test_every`-th sequence is held out for evaluation.
    pub test_every: usize,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            fps: 25,
            past_frames: 10,
            future_frames: 25,
            stride: 5,
            eval_stride: None,
            center_on_root: false,
            root_joint: 0,
            test_every: 4,
            synth: SynthSection::default(),
        }
    }
}

impl DataSection {
    pub fn eval_stride(&self) -> usize {
        self.eval_stride.unwrap_or(self.future_frames)
    }

    pub fn root(&self) -> Option<usize> {
        self.center_on_root.then_some(self.root_joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mode: PretrainMode,
    pub steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub grad_clip: f64,
    pub alpha: f64,
    pub noise_sigma: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = StageOptions::default();
        let p = PretrainOptions::default();
        Self {
            mode: p.mode,
            steps: s.steps,
            lr: s.lr,
            lr_min: s.lr_min,
            batch: s.batch,
            grad_clip: s.grad_clip,
            alpha: p.alpha,
            noise_sigma: p.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub grad_clip: f64,
    pub freeze_pme: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = StageOptions::default();
        Self {
            steps: s.steps,
            lr: s.lr,
            lr_min: s.lr_min,
            batch: s.batch,
            grad_clip: s.grad_clip,
            freeze_pme: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub horizons_ms: Vec<u32>,
    /// Run the linear probe during `eval`.
    pub probe: bool,
    /// Fraction of windows used to train the probe.
    pub probe_split: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizons_ms: vec![80, 160, 320, 400, 560, 1000],
            probe: true,
            probe_split: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub mask: MaskOptions,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub seed: u64,
    /// Output directory.
    pub out: Option<PathBuf>,
}

fn constraint(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Parses a JSON config from text; absent keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        constraint(&key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a JSON config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(constraint(key, format!("rate ∈ [0,1], got {v}")))
            }
        };
        unit("mask.rate", self.mask.rate)?;
        let positive = [
            ("data.fps", self.data.fps as usize),
            ("data.future_frames", self.data.future_frames),
            ("data.stride", self.data.stride),
            ("data.eval_stride", self.data.eval_stride()),
            ("data.synth.classes", self.data.synth.classes),
            ("data.synth.per_class", self.data.synth.per_class),
            ("data.synth.fps", self.data.synth.fps as usize),
            ("pretrain.batch", self.pretrain.batch),
            ("finetune.batch", self.finetune.batch),
            ("model.pme_layers", self.model.pme_layers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(constraint(key, "must be >= 1"));
            }
        }
        if self.data.past_frames < 2 {
            return Err(constraint("data.past_frames", "must be >= 2"));
        }
        if self.data.synth.frames < 2 {
            return Err(constraint("data.synth.frames", "must be >= 2"));
        }
        for (key, lr, min) in [
            ("pretrain.lr", self.pretrain.lr, self.pretrain.lr_min),
            ("finetune.lr", self.finetune.lr, self.finetune.lr_min),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(constraint(key, format!("must be > 0, got {lr}")));
            }
            if !(0.0..=lr).contains(&min) {
                return Err(constraint(
                    &format!("{key}_min"),
                    format!("must lie in [0, lr], got {min}"),
                ));
            }
        }
        if self.pretrain.noise_sigma.is_nan() || self.pretrain.noise_sigma < 0.0 {
            return Err(constraint("pretrain.noise_sigma", "must be >= 0"));
        }
        if self.pretrain.alpha.is_nan() || self.pretrain.alpha < 0.0 {
            return Err(constraint("pretrain.alpha", "must be >= 0"));
        }
        for (key, v) in [
            ("pretrain.grad_clip", self.pretrain.grad_clip),
            ("finetune.grad_clip", self.finetune.grad_clip),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(constraint(key, "must be >= 0"));
            }
        }
        if !(self.eval.probe_split > 0.0 && self.eval.probe_split < 1.0) {
            return Err(constraint("eval.probe_split", "must lie in (0,1)"));
        }
        let h = &self.eval.horizons_ms;
        if h.is_empty() || h.windows(2).any(|w| w[0] >= w[1]) {
            return Err(constraint(
                "eval.horizons_ms",
                "must be non-empty and strictly increasing",
            ));
        }
        for &ms in h {
            let frame = crate::data::ms_to_frame(ms, self.data.fps)
                .map_err(|e| constraint("eval.horizons_ms", e.to_string()))?;
            if frame == 0 || frame > self.data.future_frames {
                return Err(constraint(
                    "eval.horizons_ms",
                    format!("{ms} ms maps to frame {frame}, outside 1..={}", self.data.future_frames),
                ));
            }
        }
        self.model_config(self.data.synth.skeleton.spec().joints()).validate()
    }

    /// Model shape for a dataset with `joints` joints of 3D coordinates.
    pub fn model_config(&self, joints: usize) -> ModelConfig {
        self.model_config_with(joints, 3)
    }

    pub fn model_config_with(&self, joints: usize, coord_dims: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            channels: m.channels,
            heads: m.heads,
            head_dim: m.head_dim,
            pme_layers: m.pme_layers,
            fmp_layers: m.fmp_layers,
            past_frames: self.data.past_frames,
            future_frames: self.data.future_frames,
            joints,
            coord_dims,
            fusion: m.fusion,
            layout: m.layout,
        }
    }

    pub fn pretrain_stage(&self) -> StageOptions {
        let p = &self.pretrain;
        StageOptions {
            steps: p.steps,
            lr: p.lr,
            lr_min: p.lr_min,
            batch: p.batch,
            grad_clip: p.grad_clip,
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            mode: self.pretrain.mode,
            alpha: self.pretrain.alpha,
            noise_sigma: self.pretrain.noise_sigma,
            mask: self.mask.clone(),
        }
    }

    pub fn finetune_stage(&self) -> StageOptions {
        let f = &self.finetune;
        StageOptions {
            steps: f.steps,
            lr: f.lr,
            lr_min: f.lr_min,
            batch: f.batch,
            grad_clip: f.grad_clip,
        }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            freeze_pme: self.finetune.freeze_pme,
        }
    }

    /// Canonical JSON of the whole configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(parse_config_str("").unwrap(), cfg);
        assert_eq!((cfg.model.channels, cfg.model.heads, cfg.model.head_dim), (128, 8, 32));
        assert_eq!((cfg.model.pme_layers, cfg.model.fmp_layers), (3, 3));
        assert_eq!((cfg.finetune.lr, cfg.finetune.batch), (5e-4, 24));
        assert_eq!((cfg.mask.rate, cfg.pretrain.alpha), (0.75, 1.0));
        assert_eq!(cfg.data.eval_stride(), 25);
    }

    #[test]
    fn partial_override() {
        let cfg = parse_config_str(r#"{"model": {"pme_layers": 2}}"#).unwrap();
        assert_eq!(cfg.model.pme_layers, 2);
        assert_eq!(cfg.model.fmp_layers, 3);
        assert_eq!(cfg.data, DataSection::default());
    }

    #[test]
    fn rate_constraint_names_key() {
        let err = parse_config_str(r#"{"mask": {"rate": 1.5}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mask.rate") && msg.contains("rate ∈ [0,1]"), "{msg}");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = parse_config_str(r#"{"model": {"depth": 2}}"#).unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "model.depth" || key == "model"),
            "{err}"
        );
        let err = parse_config_str(r#"{"pretrain": {"steps": "many"}}"#).unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "pretrain.steps"),
            "{err}"
        );
    }

    #[test]
    fn horizons_must_fit_the_future() {
        let err = parse_config_str(r#"{"eval": {"horizons_ms": [80, 1040]}}"#).unwrap_err();
        assert!(err.to_string().contains("eval.horizons_ms"));
        let err = parse_config_str(r#"{"eval": {"horizons_ms": [90]}}"#).unwrap_err();
        assert!(err.to_string().contains("eval.horizons_ms"));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = parse_config_str(r#"{"seed": 9, "model": {"fusion": "concat"}}"#).unwrap();
        assert_eq!(parse_config_str(&cfg.to_json()).unwrap(), cfg);
    }
}
