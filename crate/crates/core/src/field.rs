//! The complete parameter set: feature grids plus MLP weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PlaneSet, SceneMode};
use crate::net::{EncoderVariant, MlpParams, NetConfig};
use crate::real::Real;

/// Which inputs reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureInputs {
    Both,
    /// Plane features are zeroed; a pure coordinate network.
    CoordsOnly,
    /// Coordinates are zeroed; a pure plane-feature model.
    PlanesOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: SceneMode,
    pub channels: usize,
    pub initial_res: usize,
    /// Time resolution of the temporal planes (dynamic scenes only).
    pub time_res: usize,
    pub hidden: usize,
    pub color_hidden: usize,
    pub variant: EncoderVariant,
    pub extra_layers: usize,
    pub view_dependent: bool,
    pub inputs: FeatureInputs,
    /// Standard deviation of the normal grid initialization.
    pub grid_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: SceneMode::Static3D,
            channels: 48,
            initial_res: 16,
            time_res: 1,
            hidden: 256,
            color_hidden: 256,
            variant: EncoderVariant::Synergy,
            extra_layers: 0,
            view_dependent: false,
            inputs: FeatureInputs::Both,
            grid_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            coord_dim: self.mode.coord_dim(),
            feature_dim: 3 * self.channels,
            hidden: self.hidden,
            color_hidden: self.color_hidden,
            variant: self.variant,
            extra_layers: self.extra_layers,
            view_dependent: self.view_dependent,
        }
    }

    pub fn effective_time_res(&self) -> usize {
        match self.mode {
            SceneMode::Static3D => 1,
            SceneMode::Dynamic4D => self.time_res,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel<T> {
    pub config: ModelConfig,
    pub planes: PlaneSet<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Real> FieldModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = PlaneSet::random(
            config.mode,
            config.channels,
            config.initial_res,
            config.effective_time_res(),
            config.grid_init_scale,
            &mut rng,
        )?;
        let mlp = MlpParams::random(config.net_config(), &mut rng)?;
        Ok(Self { config, planes, mlp })
    }

    /// Assembles a model from existing parameters, checking they agree with `config`.
    pub fn from_parts(config: ModelConfig, planes: PlaneSet<T>, mlp: MlpParams<T>) -> Result<Self> {
        if planes.mode() != config.mode || planes.channels() != config.channels {
            return Err(Error::InvalidArgument("plane set does not match model config".into()));
        }
        if mlp.config() != &config.net_config() {
            return Err(Error::InvalidArgument("MLP does not match model config".into()));
        }
        Ok(Self { config, planes, mlp })
    }

    pub fn mode(&self) -> SceneMode {
        self.config.mode
    }

    /// Named flat parameter tensors; grids first, then MLP layers.
    pub fn param_groups(&self) -> Vec<(String, Vec<usize>, &[T])> {
        param_groups(&self.planes, &self.mlp)
    }

    pub fn param_groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        param_groups_mut(&mut self.planes, &mut self.mlp)
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.planes.is_finite() && self.mlp.is_finite()
    }

    /// Replaces the grids by an upsampled copy.
    pub fn upsample(&mut self, new_res: usize) -> Result<()> {
        self.planes = self.planes.upsample(new_res, self.planes.time_res())?;
        Ok(())
    }
}

pub(crate) const PLANE_NAMES: [&str; 3] = ["planes.xy", "planes.yz", "planes.zx"];
pub(crate) const FACTOR_NAMES: [&str; 3] = ["factors.0", "factors.1", "factors.2"];

pub(crate) fn param_groups<'a, T: Real>(
    planes: &'a PlaneSet<T>,
    mlp: &'a MlpParams<T>,
) -> Vec<(String, Vec<usize>, &'a [T])> {
    let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    for (k, g) in planes.planes().iter().enumerate() {
        out.push((PLANE_NAMES[k].into(), g.shape().to_vec(), g.data()));
    }
    for (k, g) in planes.factors().iter().enumerate() {
        out.push((FACTOR_NAMES[k].into(), g.shape().to_vec(), g.data()));
    }
    out.extend(mlp.tensors());
    out
}

pub(crate) fn param_groups_mut<'a, T: Real>(
    planes: &'a mut PlaneSet<T>,
    mlp: &'a mut MlpParams<T>,
) -> Vec<(String, &'a mut [T])> {
    let mut out: Vec<(String, &mut [T])> = Vec::new();
    let (plane_grids, factor_grids) = planes.split_mut();
    for (k, g) in plane_grids.iter_mut().enumerate() {
        out.push((PLANE_NAMES[k].into(), g.data_mut()));
    }
    for (k, g) in factor_grids.iter_mut().enumerate() {
        out.push((FACTOR_NAMES[k].into(), g.data_mut()));
    }
    out.extend(mlp.tensors_mut());
    out
}

/// Gradient buffers shaped like a [`FieldModel`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T> {
    pub planes: PlaneSet<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_for(model: &FieldModel<T>) -> Self {
        Self {
            planes: model.planes.zeros_like(),
            mlp: model.mlp.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.planes.add_assign(&other.planes);
        self.mlp.add_assign(&other.mlp);
    }

    pub fn groups(&self) -> Vec<(String, Vec<usize>, &[T])> {
        param_groups(&self.planes, &self.mlp)
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        param_groups_mut(&mut self.planes, &mut self.mlp)
    }

    pub fn is_finite(&self) -> bool {
        self.planes.is_finite() && self.mlp.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.groups()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x.to_f64_lossy().abs())
            .fold(0.0, f64::max)
    }
}
