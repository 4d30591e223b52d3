//! Adam with per-group learning rates, and the radiance-field training loop.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneDataset;
use crate::diff::{backward, render_image, RenderOptions, Supervision};
use crate::error::{Error, Result};
use crate::field::{FieldModel, ModelConfig};
use crate::loss::{LossTerms, LossWeights};
use crate::metrics::{psnr, psnr_from_mse, EvalReport};
use crate::raster::Image;
use crate::real::Real;
use crate::render::{generate_rays, Aabb, RaySampleBatch};
use crate::schedule::{curriculum_weights, CurriculumConfig, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `step` counts updates including this one.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    for (what, len) in [("gradient", grads.len()), ("first moment", m.len()), ("second moment", v.len())] {
        if len != n {
            return Err(Error::shape(format!("adam {what}"), n, len));
        }
    }
    let t = step.max(1) as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::of(1.0 - cfg.beta1.powi(t));
    let corr2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for i in 0..n {
        let g = grads[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Moment buffers for one named parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub groups: Vec<AdamMoments<T>>,
}

/// Whether a parameter group is a feature grid (as opposed to MLP weights).
pub fn is_grid_group(name: &str) -> bool {
    name.starts_with("planes.") || name.starts_with("factors.")
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, groups: &[(String, usize)]) -> Self {
        Self {
            config,
            groups: groups
                .iter()
                .map(|(name, len)| AdamMoments {
                    name: name.clone(),
                    m: vec![T::zero(); *len],
                    v: vec![T::zero(); *len],
                    step: 0,
                })
                .collect(),
        }
    }

    pub fn for_model(config: AdamConfig, model: &FieldModel<T>) -> Self {
        Self::new(config, &group_sizes(model))
    }

    /// Updates every group; `lr` maps a group name to its learning rate.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut [T])>,
        grads: Vec<(String, Vec<usize>, &[T])>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(Error::shape("adam parameter groups", self.groups.len(), params.len()));
        }
        for ((state, (name, p)), (gname, _, g)) in self.groups.iter_mut().zip(params).zip(grads) {
            if state.name != name || gname != name {
                return Err(Error::InvalidArgument(format!(
                    "adam group order mismatch: {} / {name} / {gname}",
                    state.name
                )));
            }
            state.step += 1;
            adam_update(p, g, &mut state.m, &mut state.v, state.step, lr(&name), &self.config)?;
        }
        Ok(())
    }

    /// Re-creates zeroed moments (and step counts) for the groups selected by
    /// `reset`, sized to `sizes`.
    pub fn reset_groups(&mut self, sizes: &[(String, usize)], reset: impl Fn(&str) -> bool) {
        for (state, (name, len)) in self.groups.iter_mut().zip(sizes) {
            if reset(name) {
                state.m = vec![T::zero(); *len];
                state.v = vec![T::zero(); *len];
                state.step = 0;
            }
        }
    }
}

fn group_sizes<T: Real>(model: &FieldModel<T>) -> Vec<(String, usize)> {
    model
        .param_groups()
        .into_iter()
        .map(|(name, _, v)| (name, v.len()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    /// Window in iterations; `channels` must match the model.
    pub curriculum: CurriculumConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub bbox: Aabb,
    /// Iterations between metric records.
    pub log_interval: usize,
    /// Number of held-out views scored at each record.
    pub eval_views: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            curriculum: CurriculumConfig::disabled(model.channels),
            model,
            schedule: TrainSchedule::default(),
            lambda1: 0.001,
            lambda2: 1.0,
            adam: AdamConfig::default(),
            batch_size: 4096,
            samples_per_ray: 64,
            seed: 0,
            background: [1.0; 3],
            bbox: Aabb::cube(1.5),
            log_interval: 500,
            eval_views: 1,
            eval_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_per_ray == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch_size, samples_per_ray and eval_samples must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        if self.curriculum.channels != self.model.channels {
            return Err(Error::Config(format!(
                "curriculum.channels ({}) must equal model.channels ({})",
                self.curriculum.channels, self.model.channels
            )));
        }
        self.curriculum.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.weights_at(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        if (0..3).any(|k| !(self.bbox.min[k] < self.bbox.max[k])) {
            return Err(Error::Config("bbox must have min < max on every axis".into()));
        }
        Ok(())
    }

    pub fn weights_at(&self, iteration: usize) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.schedule.lambda3_at(iteration),
        }
    }

    /// Curriculum weights for `iteration`, or `None` when disabled.
    pub fn gamma_at(&self, iteration: usize) -> Option<Vec<f64>> {
        self.curriculum
            .enabled
            .then(|| curriculum_weights(&self.curriculum, iteration as f64))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Completed iterations.
    pub iteration: usize,
    pub loss: LossTerms,
    pub batch_psnr: f64,
    pub heldout_psnr: Option<f64>,
    pub resolution: usize,
    pub lr_plane: f64,
    pub lambda3: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: FieldModel<T>,
    pub adam: AdamState<T>,
    /// Next iteration to run.
    pub iteration: usize,
    pub log: Vec<LogRecord>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FieldModel::new(cfg.model.clone(), cfg.seed)?;
        let adam = AdamState::for_model(cfg.adam, &model);
        Ok(Self {
            model,
            adam,
            iteration: 0,
            log: Vec::new(),
        })
    }
}

/// Optional callbacks and limits for [`train`].
pub struct TrainHooks<'a, T> {
    pub on_log: Option<&'a mut dyn FnMut(&LogRecord)>,
    /// Called after every `checkpoint_every` iterations.
    pub on_checkpoint: Option<&'a mut dyn FnMut(&TrainState<T>) -> Result<()>>,
    pub checkpoint_every: usize,
    /// Stop (as if interrupted) once this many iterations have completed.
    pub stop_at: Option<usize>,
    /// Where to write the offending batch if training diverges.
    pub dump_dir: Option<PathBuf>,
}

impl<T> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        Self {
            on_log: None,
            on_checkpoint: None,
            checkpoint_every: 0,
            stop_at: None,
            dump_dir: None,
        }
    }
}

/// A sampled training batch.
pub struct Batch {
    pub samples: RaySampleBatch,
    pub targets: Vec<f64>,
}

/// Draws `cfg.batch_size` random training pixels for `iteration`. The
/// generator depends only on the seed and the iteration, so a resumed run
/// sees the same batches.
pub fn sample_batch(data: &SceneDataset, cfg: &TrainConfig, iteration: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration as u64 + 1);
    let mut rays = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(3 * cfg.batch_size);
    let mut times = data.times.as_ref().map(|_| Vec::with_capacity(cfg.batch_size));
    for _ in 0..cfg.batch_size {
        let view = rng.random_range(0..data.len());
        let cam = &data.cameras[view];
        let (x, y) = (rng.random_range(0..cam.width), rng.random_range(0..cam.height));
        rays.extend(generate_rays(cam, &[(x, y)])?);
        targets.extend_from_slice(&data.images[view].get(x, y));
        if let Some(t) = times.as_mut() {
            t.push(data.time(view).unwrap_or(0.0));
        }
    }
    let cam = &data.cameras[0];
    let samples = RaySampleBatch::build(rays, times, cfg.samples_per_ray, cam.near, cam.far, &cfg.bbox, true, &mut rng);
    Ok(Batch { samples, targets })
}

/// Renders the first `limit` views of `data` with the model's state at `iteration`.
pub fn render_views<T: Real>(
    model: &FieldModel<T>,
    data: &SceneDataset,
    cfg: &TrainConfig,
    iteration: usize,
    limit: usize,
) -> Result<Vec<Image>> {
    let gamma = cfg.gamma_at(iteration);
    let opts = RenderOptions {
        n_samples: cfg.eval_samples,
        bbox: cfg.bbox,
        background: cfg.background,
        gamma: gamma.as_deref(),
    };
    (0..data.len().min(limit))
        .map(|v| Ok(render_image(model, &data.cameras[v], data.time(v), &opts)?.image))
        .collect()
}

/// Scores every view of `data`.
pub fn evaluate<T: Real>(
    model: &FieldModel<T>,
    data: &SceneDataset,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<EvalReport> {
    let rendered = render_views(model, data, cfg, iteration, data.len())?;
    let pairs: Vec<(Image, Image)> = rendered.into_iter().zip(data.images.iter().cloned()).collect();
    EvalReport::from_pairs(&pairs)
}

fn heldout_psnr<T: Real>(
    model: &FieldModel<T>,
    data: &SceneDataset,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<f64> {
    let rendered = render_views(model, data, cfg, iteration, cfg.eval_views.max(1))?;
    let total: f64 = rendered
        .iter()
        .zip(&data.images)
        .map(|(a, b)| psnr(a, b))
        .sum::<Result<f64>>()?;
    Ok(total / rendered.len() as f64)
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    iteration: usize,
    error: String,
    origins: Vec<[f64; 3]>,
    directions: Vec<[f64; 3]>,
    times: Option<&'a [f64]>,
    targets: &'a [f64],
}

fn dump_batch(dir: &PathBuf, iteration: usize, err: &Error, batch: &Batch) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dump = DivergenceDump {
        iteration,
        error: err.to_string(),
        origins: batch.samples.rays.iter().map(|r| r.origin).collect(),
        directions: batch.samples.rays.iter().map(|r| r.direction).collect(),
        times: batch.samples.times.as_deref(),
        targets: &batch.targets,
    };
    let json = serde_json::to_string(&dump).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(dir.join(format!("diverged_{iteration}.json")), json)?;
    Ok(())
}

/// Runs the training loop from `state.iteration` to the configured total.
///
/// Each iteration: upsample grids if scheduled (resetting their Adam
/// moments), draw a batch, compute the loss and gradients under the current
/// curriculum and λ schedule, then take one Adam step with per-group rates.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &SceneDataset,
    heldout: Option<&SceneDataset>,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_, T>,
) -> Result<()> {
    cfg.validate()?;
    if data.mode() != cfg.model.mode {
        return Err(Error::Config(format!(
            "dataset is {:?} but the model is configured for {:?}",
            data.mode(),
            cfg.model.mode
        )));
    }
    let total = cfg.schedule.total_iters;
    let end = hooks.stop_at.map_or(total, |s| s.min(total));
    while state.iteration < end {
        let it = state.iteration;
        if let Some(res) = cfg.schedule.upsample_at(it) {
            state.model.upsample(res)?;
            let sizes = group_sizes(&state.model);
            state.adam.reset_groups(&sizes, is_grid_group);
        }
        let gamma = cfg.gamma_at(it);
        let batch = sample_batch(data, cfg, it)?;
        let sup = Supervision {
            samples: &batch.samples,
            targets: &batch.targets,
            background: cfg.background,
            gamma: gamma.as_deref(),
            weights: cfg.weights_at(it),
        };
        let (terms, grads) = match backward(&state.model, &sup) {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = &hooks.dump_dir {
                    dump_batch(dir, it, &e, &batch)?;
                }
                return Err(e);
            }
        };
        let (lr_plane, lr_mlp) = cfg.schedule.lr_at(it);
        let lr = |name: &str| if is_grid_group(name) { lr_plane } else { lr_mlp };
        state.adam.step(state.model.param_groups_mut(), grads.groups(), lr)?;
        if !state.model.is_finite() {
            let e = Error::NonFinite { stage: "parameters" };
            if let Some(dir) = &hooks.dump_dir {
                dump_batch(dir, it, &e, &batch)?;
            }
            return Err(e);
        }
        state.iteration += 1;
        let done = state.iteration;
        if done.is_multiple_of(cfg.log_interval) || done == total {
            let heldout_psnr = match heldout {
                Some(h) => Some(heldout_psnr(&state.model, h, cfg, it)?),
                None => None,
            };
            let record = LogRecord {
                iteration: done,
                loss: terms,
                batch_psnr: psnr_from_mse(terms.photometric / 3.0),
                heldout_psnr,
                resolution: state.model.planes.spatial_res(),
                lr_plane,
                lambda3: sup.weights.lambda3,
            };
            if let Some(f) = hooks.on_log.as_mut() {
                f(&record);
            }
            state.log.push(record);
        }
        if hooks.checkpoint_every > 0 && done.is_multiple_of(hooks.checkpoint_every) {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                f(state)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0f64, -2.0];
        let mut m = vec![0.5, 0.5];
        let mut v = vec![0.25, 0.25];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, 0.1, &AdamConfig::default()).unwrap();
        assert_ne!(p, vec![1.0, -2.0]);
        let mut p = vec![1.0f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut m = vec![1.0];
        let mut v = vec![1.0];
        adam_update(&mut [0.0f64], &[0.0], &mut m, &mut v, 2, 0.1, &AdamConfig::default()).unwrap();
        assert!((m[0] - 0.9).abs() < 1e-15 && (v[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0f64, -0.02] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, 0.01, &AdamConfig::default()).unwrap();
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut x = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=100 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let r = adam_update(&mut [0.0f64; 2], &[0.0], &mut [0.0; 2], &mut [0.0; 2], 1, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn reset_only_touches_selected_groups() {
        let mut s = AdamState::<f32>::new(
            AdamConfig::default(),
            &[("planes.xy".into(), 2), ("encoder.0.weight".into(), 2)],
        );
        for g in &mut s.groups {
            g.m.fill(1.0);
            g.step = 5;
        }
        s.reset_groups(&[("planes.xy".into(), 4), ("encoder.0.weight".into(), 2)], is_grid_group);
        assert_eq!(s.groups[0].m, vec![0.0; 4]);
        assert_eq!(s.groups[0].step, 0);
        assert_eq!(s.groups[1].m, vec![1.0; 2]);
        assert_eq!(s.groups[1].step, 5);
    }

    #[test]
    fn mismatched_curriculum_channels_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.curriculum.channels = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
