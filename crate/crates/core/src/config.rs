//! Flat run configuration shared by every subcommand.
//!
//! One TOML table whose keys cover the toy scene, windowing, augmentation,
//! network and training settings. Unknown keys are rejected. Values resolve
//! in the order defaults, then the config file, then `--set key=value`
//! overrides, then dedicated command-line flags.
//!
//! Randomness: `seed` is the root. Scene `i` of split `s` uses
//! `child_seed(seed, "scene/<s>/<i>")`, network init uses `init/<param>`,
//! batch order `batches/epoch<e>` and augmentation `augment/<step>/<slot>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentMethod, AugmentParams, AugmentSpec};
use crate::error::{Error, Result};
use crate::event::WindowPolicy;
use crate::io::EventFormat;
use crate::model::{BranchMode, FusionMode, GateFn, ModelConfig};
use crate::synth::{ScenePattern, ToySceneSpec};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Duration,
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; TOML integers are signed, so at most `i64::MAX`.
    pub seed: u64,

    /// HR sensor width of synthesized scenes.
    pub width: usize,
    pub height: usize,
    pub pattern: ScenePattern,
    /// Pixels per millisecond.
    pub velocity: f64,
    pub duration_us: u64,
    pub events_per_crossing: f64,
    /// Background events per pixel per second.
    pub noise_rate: f64,
    pub event_format: EventFormat,

    pub window_kind: WindowKind,
    pub window_us: u64,
    pub window_events: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,

    pub augment: AugmentMethod,
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    pub drop_time_ratio_max: f64,
    pub drop_prob: f64,
    pub drop_area_ratio: f64,
    pub noise_drop_prob: f64,
    pub noise_ratio: f64,
    pub translate_max_fraction: f64,
    pub crop_scale_min: f64,

    pub scale: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub attn_channels_ratio: f64,
    pub branch_mode: BranchMode,
    pub ffm_mode: FusionMode,
    pub fem_mode: FusionMode,
    pub fem_gate_fn: GateFn,
    pub normalize_input: bool,
    pub max_attention_positions: usize,

    pub learning_rate: f64,
    pub steps: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub eval_interval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines loss curve destination.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_log: Option<PathBuf>,
    /// Include elapsed wall-clock time in loss records. Off makes the log a
    /// pure function of the configuration.
    pub log_wall_ms: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = ToySceneSpec::default();
        let aug = AugmentParams::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            width: scene.width,
            height: scene.height,
            pattern: scene.pattern,
            velocity: scene.velocity,
            duration_us: 50_000,
            events_per_crossing: scene.events_per_crossing,
            noise_rate: scene.noise_rate,
            event_format: EventFormat::Text,
            window_kind: WindowKind::Duration,
            window_us: 5_000,
            window_events: 256,
            train_sequences: 32,
            eval_sequences: 8,
            augment: AugmentMethod::None,
            flip_horizontal_prob: aug.flip_horizontal_prob,
            flip_vertical_prob: aug.flip_vertical_prob,
            drop_time_ratio_max: aug.drop_time_ratio_max,
            drop_prob: aug.drop_prob,
            drop_area_ratio: aug.drop_area_ratio,
            noise_drop_prob: aug.noise_drop_prob,
            noise_ratio: aug.noise_ratio,
            translate_max_fraction: aug.translate_max_fraction,
            crop_scale_min: aug.crop_scale_min,
            scale: model.scale,
            channels: model.channels,
            num_blocks: model.num_blocks,
            attn_channels_ratio: model.attn_channels_ratio,
            branch_mode: model.branch_mode,
            ffm_mode: model.ffm_mode,
            fem_mode: model.fem_mode,
            fem_gate_fn: model.fem_gate_fn,
            normalize_input: model.normalize_input,
            max_attention_positions: model.max_attention_positions,
            learning_rate: train.learning_rate,
            steps: train.steps,
            seq_len: train.seq_len,
            batch_size: train.batch_size,
            eval_interval: train.eval_interval,
            checkpoint: None,
            loss_log: None,
            log_wall_ms: true,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// A `--set` value: any TOML literal, or a bare string when it does not parse as one.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&src)
    }

    /// Defaults, overlaid by `file` when given, then by each `key=value`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for kv in overrides {
            cfg.set(kv)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        let key = key.trim();
        let mut table = toml::Table::try_from(&*self).map_err(config_err)?;
        if !Self::keys().contains(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        table.insert(key.to_string(), parse_value(raw.trim()));
        *self = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Every accepted key, in file order.
    pub fn keys() -> &'static [&'static str] {
        &[
            "seed",
            "width",
            "height",
            "pattern",
            "velocity",
            "duration_us",
            "events_per_crossing",
            "noise_rate",
            "event_format",
            "window_kind",
            "window_us",
            "window_events",
            "train_sequences",
            "eval_sequences",
            "augment",
            "flip_horizontal_prob",
            "flip_vertical_prob",
            "drop_time_ratio_max",
            "drop_prob",
            "drop_area_ratio",
            "noise_drop_prob",
            "noise_ratio",
            "translate_max_fraction",
            "crop_scale_min",
            "scale",
            "channels",
            "num_blocks",
            "attn_channels_ratio",
            "branch_mode",
            "ffm_mode",
            "fem_mode",
            "fem_gate_fn",
            "normalize_input",
            "max_attention_positions",
            "learning_rate",
            "steps",
            "seq_len",
            "batch_size",
            "eval_interval",
            "checkpoint",
            "loss_log",
            "log_wall_ms",
        ]
    }

    /// Scene spec with the root seed; datasets derive per-scene seeds from it.
    pub fn scene(&self) -> ToySceneSpec {
        ToySceneSpec {
            width: self.width,
            height: self.height,
            pattern: self.pattern,
            velocity: self.velocity,
            duration_us: self.duration_us,
            events_per_crossing: self.events_per_crossing,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }

    pub fn window_policy(&self) -> WindowPolicy {
        match self.window_kind {
            WindowKind::Duration => WindowPolicy::FixedDuration(self.window_us),
            WindowKind::Count => WindowPolicy::FixedCount(self.window_events),
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            flip_horizontal_prob: self.flip_horizontal_prob,
            flip_vertical_prob: self.flip_vertical_prob,
            drop_time_ratio_max: self.drop_time_ratio_max,
            drop_prob: self.drop_prob,
            drop_area_ratio: self.drop_area_ratio,
            noise_drop_prob: self.noise_drop_prob,
            noise_ratio: self.noise_ratio,
            translate_max_fraction: self.translate_max_fraction,
            crop_scale_min: self.crop_scale_min,
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec { method: self.augment, params: self.augment_params(), seed: self.seed }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            scale: self.scale,
            channels: self.channels,
            num_blocks: self.num_blocks,
            attn_channels_ratio: self.attn_channels_ratio,
            branch_mode: self.branch_mode,
            ffm_mode: self.ffm_mode,
            fem_mode: self.fem_mode,
            fem_gate_fn: self.fem_gate_fn,
            normalize_input: self.normalize_input,
            max_attention_positions: self.max_attention_positions,
        }
    }

    pub fn set_model_config(&mut self, m: &ModelConfig) {
        self.scale = m.scale;
        self.channels = m.channels;
        self.num_blocks = m.num_blocks;
        self.attn_channels_ratio = m.attn_channels_ratio;
        self.branch_mode = m.branch_mode;
        self.ffm_mode = m.ffm_mode;
        self.fem_mode = m.fem_mode;
        self.fem_gate_fn = m.fem_gate_fn;
        self.normalize_input = m.normalize_input;
        self.max_attention_positions = m.max_attention_positions;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            augment: self.augment,
            augment_params: self.augment_params(),
            eval_interval: self.eval_interval,
            checkpoint: self.checkpoint.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene width and height must be positive".into()));
        }
        if !(self.velocity > 0.0 && self.velocity.is_finite()) {
            return Err(Error::Config(format!("velocity must be > 0, got {}", self.velocity)));
        }
        if self.duration_us == 0 {
            return Err(Error::Config("duration_us must be > 0".into()));
        }
        if !self.width.is_multiple_of(self.scale) || !self.height.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "scale {} does not divide the {}x{} scene",
                self.scale, self.width, self.height
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.model_config().validate()?;
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn every_key_is_listed_and_serialized() {
        let cfg = RunConfig { checkpoint: Some("a.ckpt".into()), loss_log: Some("loss.jsonl".into()), ..RunConfig::default() };
        let table = toml::Table::try_from(&cfg).unwrap();
        let mut have: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut want = RunConfig::keys().to_vec();
        have.sort_unstable();
        want.sort_unstable();
        assert_eq!(have, want);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::default().set("bogus=1").is_err());
        assert!(RunConfig::default().set("seed").is_err());
    }

    #[test]
    fn overrides_take_typed_and_bare_values() {
        let mut cfg = RunConfig::default();
        cfg.set("steps=7").unwrap();
        cfg.set("learning_rate = 0.01").unwrap();
        cfg.set("pattern=two_bars").unwrap();
        cfg.set("fem_gate_fn=\"softmax\"").unwrap();
        cfg.set("checkpoint=out/model.ckpt").unwrap();
        cfg.set("normalize_input=false").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.pattern, ScenePattern::TwoBars);
        assert_eq!(cfg.fem_gate_fn, GateFn::Softmax);
        assert_eq!(cfg.checkpoint.as_deref(), Some(Path::new("out/model.ckpt")));
        assert!(!cfg.normalize_input);
        assert!(cfg.set("steps=lots").is_err());
        assert!(cfg.set("pattern=spiral").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "steps = 3\nseed = 9\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["seed=4".into()]).unwrap();
        assert_eq!((cfg.steps, cfg.seed, cfg.channels), (3, 4, 16));
    }

    #[test]
    fn projections_match_fields() {
        let mut cfg = RunConfig::default();
        cfg.set("window_kind=count").unwrap();
        cfg.set("window_events=100").unwrap();
        assert_eq!(cfg.window_policy(), WindowPolicy::FixedCount(100));
        let m = cfg.model_config();
        let mut other = RunConfig::default();
        other.set_model_config(&m);
        assert_eq!(other.model_config(), m);
        assert_eq!(cfg.augment_params(), AugmentParams::default());
        assert_eq!(cfg.train_config().seq_len, 9);
    }

    #[test]
    fn validation_catches_bad_combinations() {
        for cfg in [
            RunConfig { width: 15, ..RunConfig::default() },
            RunConfig { velocity: 0.0, ..RunConfig::default() },
            RunConfig { seq_len: 0, ..RunConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn random_configs_round_trip(
                seed in 0u64..=i64::MAX as u64,
                velocity in 0.01f64..10.0,
                lr in 1e-6f64..1.0,
                steps in 1usize..100_000,
                drop in 0.0f64..1.0,
                multi in any::<bool>(),
            ) {
                let mut cfg = RunConfig { seed, velocity, learning_rate: lr, steps, drop_prob: drop, ..RunConfig::default() };
                if !multi {
                    cfg.branch_mode = BranchMode::Single;
                }
                let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
                prop_assert_eq!(back, cfg);
            }
        }
    }
}
