//! Residual encoder, density head and color decoder.
//!
//! Every encoder layer reads a concatenation of some of: the raw coordinates
//! `s`, the fused plane features `f`, and the previous layer's activation.
//! The four encoder variants differ only in that wiring.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderVariant {
    /// Two residual blocks; block 2 re-reads `s ⊕ f ⊕ φ1`.
    Synergy,
    /// `s ⊕ f` concatenated into every layer.
    Type1,
    /// Plain feed-forward stack.
    Type2,
    /// Like `Synergy`, but block 2 re-reads only `s ⊕ φ1`.
    Type3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Coords,
    Features,
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub coord_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub color_hidden: usize,
    pub variant: EncoderVariant,
    /// Single-pair layers appended after the two residual blocks.
    pub extra_layers: usize,
    /// Append the unit view direction to the color decoder input.
    pub view_dependent: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            coord_dim: 3,
            feature_dim: 3 * 48,
            hidden: 256,
            color_hidden: 256,
            variant: EncoderVariant::Synergy,
            extra_layers: 0,
            view_dependent: false,
        }
    }
}

impl NetConfig {
    pub fn wiring(&self) -> Vec<Vec<Source>> {
        use Source::*;
        let mut w = match self.variant {
            EncoderVariant::Synergy => vec![
                vec![Coords, Features],
                vec![Previous],
                vec![Coords, Features, Previous],
                vec![Previous],
            ],
            EncoderVariant::Type1 => vec![
                vec![Coords, Features],
                vec![Coords, Features, Previous],
                vec![Coords, Features, Previous],
                vec![Coords, Features, Previous],
            ],
            EncoderVariant::Type2 => vec![
                vec![Coords, Features],
                vec![Previous],
                vec![Previous],
                vec![Previous],
            ],
            EncoderVariant::Type3 => vec![
                vec![Coords, Features],
                vec![Previous],
                vec![Coords, Previous],
                vec![Previous],
            ],
        };
        w.extend((0..self.extra_layers).map(|_| vec![Previous]));
        w
    }

    fn source_width(&self, src: Source) -> usize {
        match src {
            Source::Coords => self.coord_dim,
            Source::Features => self.feature_dim,
            Source::Previous => self.hidden,
        }
    }

    fn color_input(&self) -> usize {
        self.hidden + if self.view_dependent { 3 } else { 0 }
    }
}

/// Dense layer `y = W x + b`, `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`); biases uniform
    /// within `1 / sqrt(fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let fan_in = inputs.max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
            T::of(rng.random_range(-bound..bound))
        });
        let bias_bound = 1.0 / fan_in.sqrt();
        let bias = Array1::from_shape_simple_fn(outputs, || T::of(rng.random_range(-bias_bound..bias_bound)));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `X Wᵀ + b` for a row-major batch `X`.
    fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut z = Array2::zeros((x.nrows(), self.outputs()));
        general_mat_mul(T::one(), &x, &self.weight.t(), T::zero(), &mut z);
        z += &self.bias;
        z
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dX`.
    fn backward(&self, x: ArrayView2<T>, dz: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &dz.t(), &x, T::one(), &mut grad.weight);
        grad.bias += &dz.sum_axis(Axis(0));
        let mut dx = Array2::zeros((dz.nrows(), self.inputs()));
        general_mat_mul(T::one(), &dz, &self.weight, T::zero(), &mut dx);
        dx
    }
}

/// All MLP weights: the encoder stack plus the two-layer color decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    config: NetConfig,
    wiring: Vec<Vec<Source>>,
    pub encoder: Vec<Linear<T>>,
    pub color: [Linear<T>; 2],
}

/// Activations saved by the encoder forward pass.
pub struct EncoderCache<T> {
    inputs: Vec<Array2<T>>,
    outputs: Vec<Array2<T>>,
}

pub struct ColorCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
    rgb: Array2<T>,
}

fn relu_inplace<T: Real>(z: &mut Array2<T>) {
    z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn relu_mask<T: Real>(d: &mut Array2<T>, activation: &Array2<T>) {
    ndarray::Zip::from(d).and(activation).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

impl<T: Real> MlpParams<T> {
    fn build(config: NetConfig, mut make: impl FnMut(usize, usize) -> Linear<T>) -> Result<Self> {
        if config.hidden == 0 || config.color_hidden == 0 {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let wiring = config.wiring();
        let encoder = wiring
            .iter()
            .map(|srcs| {
                let fan_in = srcs.iter().map(|&s| config.source_width(s)).sum();
                make(fan_in, config.hidden)
            })
            .collect();
        let color = [
            make(config.color_input(), config.color_hidden),
            make(config.color_hidden, 3),
        ];
        Ok(Self {
            config,
            wiring,
            encoder,
            color,
        })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        Self::build(config, Linear::zeros)
    }

    pub fn random<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |i, o| Linear::kaiming(i, o, rng))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn wiring(&self) -> &[Vec<Source>] {
        &self.wiring
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        self.encoder.iter().chain(self.color.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        self.encoder.iter_mut().chain(self.color.iter_mut())
    }

    /// Named flat views of every weight and bias.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (name, layer) in self.layer_names().into_iter().zip(self.layers()) {
            out.push((
                format!("{name}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let names = self.layer_names();
        let mut out = Vec::new();
        for (name, layer) in names.into_iter().zip(self.layers_mut()) {
            out.push((
                format!("{name}.weight"),
                layer.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                layer.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    fn layer_names(&self) -> Vec<String> {
        (0..self.encoder.len())
            .map(|l| format!("encoder.{l}"))
            .chain(["color.0".to_string(), "color.1".to_string()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Batched encoder: rows of `coords` and `features` are samples. Every
    /// layer but the last is followed by a ReLU.
    pub fn encode_batch(
        &self,
        coords: ArrayView2<T>,
        features: ArrayView2<T>,
    ) -> Result<(Array2<T>, EncoderCache<T>)> {
        if coords.ncols() != self.config.coord_dim {
            return Err(Error::shape("encoder.0 coordinate input", self.config.coord_dim, coords.ncols()));
        }
        if features.ncols() != self.config.feature_dim {
            return Err(Error::shape("encoder.0 feature input", self.config.feature_dim, features.ncols()));
        }
        if coords.nrows() != features.nrows() {
            return Err(Error::shape("encoder batch rows", coords.nrows(), features.nrows()));
        }
        let n = coords.nrows();
        let mut inputs = Vec::with_capacity(self.encoder.len());
        let mut outputs: Vec<Array2<T>> = Vec::with_capacity(self.encoder.len());
        for (l, (layer, srcs)) in self.encoder.iter().zip(&self.wiring).enumerate() {
            let mut x = Array2::zeros((n, layer.inputs()));
            let mut col = 0;
            for &src in srcs {
                let part = match src {
                    Source::Coords => coords.view(),
                    Source::Features => features.view(),
                    Source::Previous => outputs[l - 1].view(),
                };
                let w = part.ncols();
                x.slice_mut(s![.., col..col + w]).assign(&part);
                col += w;
            }
            let mut a = layer.forward(x.view());
            if l + 1 < self.encoder.len() {
                relu_inplace(&mut a);
            }
            inputs.push(x);
            outputs.push(a);
        }
        let hidden = outputs.last().expect("encoder has layers").clone();
        Ok((hidden, EncoderCache { inputs, outputs }))
    }

    /// Adjoint of [`MlpParams::encode_batch`]; returns `(dL/ds, dL/df)`.
    pub fn encode_backward(
        &self,
        cache: &EncoderCache<T>,
        d_hidden: Array2<T>,
        grad: &mut MlpParams<T>,
    ) -> (Array2<T>, Array2<T>) {
        let n = d_hidden.nrows();
        let mut ds = Array2::zeros((n, self.config.coord_dim));
        let mut df = Array2::zeros((n, self.config.feature_dim));
        let mut d_out = d_hidden;
        for l in (0..self.encoder.len()).rev() {
            if l + 1 < self.encoder.len() {
                relu_mask(&mut d_out, &cache.outputs[l]);
            }
            let dx = self.encoder[l].backward(cache.inputs[l].view(), d_out.view(), &mut grad.encoder[l]);
            let mut d_prev = Array2::zeros((n, self.config.hidden));
            let mut col = 0;
            for &src in &self.wiring[l] {
                let w = self.config.source_width(src);
                let part = dx.slice(s![.., col..col + w]);
                match src {
                    Source::Coords => ds += &part,
                    Source::Features => df += &part,
                    Source::Previous => d_prev += &part,
                }
                col += w;
            }
            d_out = d_prev;
        }
        (ds, df)
    }

    /// Two-layer decoder followed by a sigmoid.
    pub fn color_batch(
        &self,
        hidden: ArrayView2<T>,
        viewdirs: Option<ArrayView2<T>>,
    ) -> Result<(Array2<T>, ColorCache<T>)> {
        if hidden.ncols() != self.config.hidden {
            return Err(Error::shape("color.0 input", self.config.hidden, hidden.ncols()));
        }
        let input = match (self.config.view_dependent, viewdirs) {
            (false, _) => hidden.to_owned(),
            (true, Some(d)) => {
                if d.ncols() != 3 || d.nrows() != hidden.nrows() {
                    return Err(Error::shape("color.0 view direction", 3, d.ncols()));
                }
                ndarray::concatenate(Axis(1), &[hidden, d]).expect("row counts checked")
            }
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "view-dependent decoder needs view directions".into(),
                ))
            }
        };
        let mut h = self.color[0].forward(input.view());
        relu_inplace(&mut h);
        let mut rgb = self.color[1].forward(h.view());
        rgb.mapv_inplace(Real::sigmoid);
        let cache = ColorCache {
            input,
            hidden: h,
            rgb: rgb.clone(),
        };
        Ok((rgb, cache))
    }

    /// Returns `dL/d hidden` given `dL/d rgb`.
    pub fn color_backward(
        &self,
        cache: &ColorCache<T>,
        d_rgb: ArrayView2<T>,
        grad: &mut MlpParams<T>,
    ) -> Array2<T> {
        let one = T::one();
        let mut dz = d_rgb.to_owned();
        ndarray::Zip::from(&mut dz)
            .and(&cache.rgb)
            .for_each(|g, &y| *g = *g * y * (one - y));
        let [g0, g1] = &mut grad.color;
        let mut dh = self.color[1].backward(cache.hidden.view(), dz.view(), g1);
        relu_mask(&mut dh, &cache.hidden);
        let dx = self.color[0].backward(cache.input.view(), dh.view(), g0);
        dx.slice(s![.., ..self.config.hidden]).to_owned()
    }

    /// Single-sample encoder.
    pub fn encode(&self, s: &[T], f: &[T]) -> Result<Vec<T>> {
        let sv = ArrayView2::from_shape((1, s.len()), s).expect("contiguous");
        let fv = ArrayView2::from_shape((1, f.len()), f).expect("contiguous");
        let (h, _) = self.encode_batch(sv, fv)?;
        Ok(h.into_raw_vec_and_offset().0)
    }

    /// Single-sample color decoder.
    pub fn color_head(&self, hidden: &[T], viewdir: Option<[T; 3]>) -> Result<[T; 3]> {
        let hv = ArrayView2::from_shape((1, hidden.len()), hidden).expect("contiguous");
        let dir = viewdir.map(|d| Array2::from_shape_vec((1, 3), d.to_vec()).expect("1x3"));
        let (rgb, _) = self.color_batch(hv, dir.as_ref().map(|d| d.view()))?;
        Ok([rgb[[0, 0]], rgb[[0, 1]], rgb[[0, 2]]])
    }
}

/// Softplus of the first hidden channel.
pub fn density_head<T: Real>(hidden: &[T]) -> Result<T> {
    let x = *hidden.first().ok_or_else(|| Error::shape("density head", 1, 0))?;
    if !x.is_finite() {
        return Err(Error::NonFinite { stage: "density head" });
    }
    Ok(x.softplus())
}
