//! Curriculum channel weighting and the iteration-indexed training schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Window over which plane-feature channels are progressively engaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    /// Iteration at which the first channel starts to engage.
    pub t_start: f64,
    /// Iteration by which every channel is fully engaged.
    pub t_end: f64,
    pub channels: usize,
}

impl CurriculumConfig {
    pub fn disabled(channels: usize) -> Self {
        Self {
            enabled: false,
            t_start: 0.0,
            t_end: 1.0,
            channels,
        }
    }

    pub fn new(t_start: f64, t_end: f64, channels: usize) -> Result<Self> {
        let cfg = Self {
            enabled: true,
            t_start,
            t_end,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window given as percentages of the total iteration count, e.g. `{5, 95}`.
    pub fn from_percent(start_pct: f64, end_pct: f64, total_iters: usize, channels: usize) -> Result<Self> {
        let total = total_iters as f64;
        Self::new(start_pct / 100.0 * total, end_pct / 100.0 * total, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidArgument("curriculum needs at least one channel".into()));
        }
        if self.enabled && !(self.t_start < self.t_end) {
            return Err(Error::InvalidArgument(format!(
                "curriculum window must satisfy t_start < t_end (got {} .. {})",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    /// `α(t) = c (t - t_s) / (t_e - t_s)`, clamped to `[0, c]`.
    pub fn alpha(&self, t: f64) -> f64 {
        let c = self.channels as f64;
        (c * (t - self.t_start) / (self.t_end - self.t_start)).clamp(0.0, c)
    }
}

/// Per-channel engagement weights `γ_j(t)`, `j = 0..c`.
pub fn curriculum_weights(cfg: &CurriculumConfig, t: f64) -> Vec<f64> {
    if !cfg.enabled {
        return vec![1.0; cfg.channels];
    }
    let alpha = cfg.alpha(t);
    (0..cfg.channels)
        .map(|j| {
            let excess = alpha - j as f64;
            if excess <= 0.0 {
                0.0
            } else if excess <= 1.0 {
                (1.0 - (excess * PI).cos()) / 2.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Multiplies each consecutive `c`-channel block of `f` by `γ`.
pub fn apply_weights<T: Real>(f: &[T], gamma: &[T]) -> Result<Vec<T>> {
    let c = gamma.len();
    if c == 0 || !f.len().is_multiple_of(c) {
        return Err(Error::shape("curriculum weights", c, f.len() % c.max(1)));
    }
    Ok(f.chunks(c)
        .flat_map(|block| block.iter().zip(gamma).map(|(&x, &g)| x * g))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_iters: usize,
    /// `(iteration, spatial resolution)` pairs, strictly increasing in both.
    pub upsample_steps: Vec<(usize, usize)>,
    pub lr_plane: f64,
    pub lr_mlp: f64,
    /// Ratio of final to initial learning rate.
    pub lr_decay_target: f64,
    pub lambda3_start: f64,
    pub lambda3_end: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_iters: 30_000,
            upsample_steps: Vec::new(),
            lr_plane: 0.02,
            lr_mlp: 0.001,
            lr_decay_target: 0.1,
            lambda3_start: 8e-5,
            lambda3_end: 4e-5,
        }
    }
}

/// Iterations (out of 30k) at which grids are upsampled by default.
pub const UPSAMPLE_ITERS_30K: [usize; 5] = [2000, 3000, 4000, 5500, 7000];

/// Resolutions log-spaced from `initial_res` to `final_res` at
/// [`UPSAMPLE_ITERS_30K`] scaled to `total_iters`. Steps that would repeat an
/// iteration or resolution are dropped.
pub fn default_upsample_steps(total_iters: usize, initial_res: usize, final_res: usize) -> Vec<(usize, usize)> {
    if final_res <= initial_res {
        return Vec::new();
    }
    let (lo, hi) = ((initial_res as f64).ln(), (final_res as f64).ln());
    let n = UPSAMPLE_ITERS_30K.len();
    let mut steps: Vec<(usize, usize)> = Vec::new();
    for (k, &it) in UPSAMPLE_ITERS_30K.iter().enumerate() {
        let iter = ((it as f64) * total_iters as f64 / 30_000.0).round() as usize;
        let res = (lo + (hi - lo) * (k + 1) as f64 / n as f64).exp().round() as usize;
        let prev = steps.last().copied().unwrap_or((0, initial_res));
        if iter >= 1 && iter > prev.0 && res > prev.1 {
            steps.push((iter, res));
        }
    }
    steps
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_plane > 0.0 && self.lr_mlp > 0.0 && self.lr_decay_target > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        for w in self.upsample_steps.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(Error::InvalidArgument(format!(
                    "upsample steps must be strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    fn progress(&self, t: usize) -> f64 {
        if self.total_iters == 0 {
            0.0
        } else {
            (t.min(self.total_iters) as f64) / self.total_iters as f64
        }
    }

    /// `(plane, mlp)` learning rates with exponential decay to
    /// `lr_decay_target` of their initial values at `total_iters`.
    pub fn lr_at(&self, t: usize) -> (f64, f64) {
        let factor = self.lr_decay_target.powf(self.progress(t));
        (self.lr_plane * factor, self.lr_mlp * factor)
    }

    /// L1 weight, linear from `lambda3_start` to `lambda3_end`.
    pub fn lambda3_at(&self, t: usize) -> f64 {
        let p = self.progress(t);
        self.lambda3_start + (self.lambda3_end - self.lambda3_start) * p
    }

    /// Target resolution if an upsample fires at iteration `t`.
    pub fn upsample_at(&self, t: usize) -> Option<usize> {
        self.upsample_steps.iter().find(|(it, _)| *it == t).map(|&(_, r)| r)
    }
}
