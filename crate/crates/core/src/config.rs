//! Training configs: JSON files, dotted overrides and per-scene presets.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::field::ModelConfig;
use crate::grid::SceneMode;
use crate::optim::TrainConfig;
use crate::render::Aabb;
use crate::schedule::{default_upsample_steps, CurriculumConfig, TrainSchedule};

pub const STATIC_SCENES: [&str; 8] = ["chair", "drums", "ficus", "hotdog", "lego", "materials", "mic", "ship"];
pub const DYNAMIC_SCENES: [&str; 8] = [
    "bouncingballs",
    "hellwarrior",
    "hook",
    "jumpingjacks",
    "lego",
    "mutant",
    "standup",
    "trex",
];

/// Full-size grid resolution reached by the end of upsampling.
pub const FINAL_RES: usize = 200;
const DYNAMIC_TIME_RES: usize = 25;

/// Parses a config, reporting unknown or malformed keys as [`Error::Config`].
pub fn from_json(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_json(cfg: &TrainConfig) -> Result<String> {
    serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Applies `key.path=value` overrides to a training config and validates it.
/// Values are parsed as JSON, falling back to a plain string.
pub fn apply_overrides(cfg: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let out = override_fields(cfg, overrides)?;
    out.validate()?;
    Ok(out)
}

/// [`apply_overrides`] for any serializable struct, without validation.
pub fn override_fields<C: Serialize + DeserializeOwned>(cfg: &C, overrides: &[String]) -> Result<C> {
    let mut root = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
            if !obj.contains_key(*part) {
                let known: Vec<&String> = obj.keys().collect();
                return Err(Error::Config(format!("unknown key {key:?}; expected one of {known:?} at {part:?}")));
            }
            node = obj.get_mut(*part).expect("checked");
        }
        *node = value;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

/// Hyperparameters for a named benchmark scene at full size.
pub fn preset(mode: SceneMode, scene: &str) -> Result<TrainConfig> {
    let (lambda1, window, initial_res) = match mode {
        SceneMode::Static3D => match scene {
            "chair" => (0.001, None, 16),
            "drums" => (0.005, Some((5.0, 95.0)), 3),
            "ficus" => (0.005, None, 3),
            "hotdog" => (0.009, None, 24),
            "lego" => (0.009, Some((10.0, 50.0)), 48),
            "materials" => (0.001, None, 48),
            "mic" => (0.009, Some((0.0, 50.0)), 48),
            "ship" => (0.005, None, 3),
            _ => return Err(unknown_scene(scene, &STATIC_SCENES)),
        },
        SceneMode::Dynamic4D => match scene {
            "bouncingballs" | "boundingballs" | "hook" | "jumpingjacks" | "mutant" => (0.001, None, 16),
            "hellwarrior" => (0.005, Some((5.0, 95.0)), 16),
            "lego" | "standup" | "trex" => (0.05, Some((5.0, 95.0)), 16),
            _ => return Err(unknown_scene(scene, &DYNAMIC_SCENES)),
        },
    };
    let model = ModelConfig {
        mode,
        initial_res,
        time_res: if mode == SceneMode::Dynamic4D { DYNAMIC_TIME_RES } else { 1 },
        ..Default::default()
    };
    let total = TrainSchedule::default().total_iters;
    let schedule = TrainSchedule {
        upsample_steps: default_upsample_steps(total, initial_res, FINAL_RES),
        ..match mode {
            SceneMode::Static3D => TrainSchedule::default(),
            SceneMode::Dynamic4D => TrainSchedule {
                lambda3_start: 1e-5,
                lambda3_end: 1e-5,
                ..Default::default()
            },
        }
    };
    let curriculum = match window {
        Some((a, b)) => CurriculumConfig::from_percent(a, b, total, model.channels)?,
        None => CurriculumConfig::disabled(model.channels),
    };
    let cfg = TrainConfig {
        model,
        schedule,
        curriculum,
        lambda1,
        lambda2: if mode == SceneMode::Dynamic4D { 2.5 } else { 1.0 },
        bbox: Aabb::cube(1.5),
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Shrinks a config to run in minutes on a single core: fewer channels, a
/// narrow MLP, smaller batches and a shorter schedule. Curriculum windows
/// keep their relative position.
pub fn desk_scale(cfg: &TrainConfig, total_iters: usize) -> Result<TrainConfig> {
    let channels = 8;
    let final_res = 64;
    let initial_res = cfg.model.initial_res.min(final_res / 2);
    let frac = |t: f64| t / cfg.schedule.total_iters.max(1) as f64 * total_iters as f64;
    let curriculum = if cfg.curriculum.enabled {
        CurriculumConfig::new(frac(cfg.curriculum.t_start), frac(cfg.curriculum.t_end), channels)?
    } else {
        CurriculumConfig::disabled(channels)
    };
    let out = TrainConfig {
        model: ModelConfig {
            channels,
            initial_res,
            hidden: 32,
            color_hidden: 32,
            grid_init_scale: 0.5,
            ..cfg.model.clone()
        },
        schedule: TrainSchedule {
            total_iters,
            upsample_steps: default_upsample_steps(total_iters, initial_res, final_res),
            lr_mlp: 0.01,
            ..cfg.schedule.clone()
        },
        curriculum,
        batch_size: 256,
        samples_per_ray: 48,
        eval_samples: 96,
        log_interval: (total_iters / 10).max(1),
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

fn unknown_scene(scene: &str, known: &[&str]) -> Error {
    Error::Config(format!("unknown scene {scene:?}; expected one of {known:?}"))
}
