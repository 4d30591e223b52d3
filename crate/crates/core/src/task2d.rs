//! Image regression with a coordinate MLP fused with a single feature plane.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Stencil};
use crate::loss::{laplacian, laplacian_grad};
use crate::net::{EncoderVariant, MlpParams, NetConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::raster::Image;
use crate::real::Real;

/// Frequencies of the optional sinusoidal coordinate lift.
pub const LIFT_OCTAVES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Regression2DConfig {
    pub plane_res: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Lift coordinates with `sin/cos(2^i π s)`, `i = 0..3`.
    pub lift: bool,
    /// Fraction of pixels used for training.
    pub keep_fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_plane: f64,
    pub lr_mlp: f64,
    /// Laplacian smoothing weight on the plane.
    pub smoothness: f64,
    pub grid_init_scale: f64,
    pub seed: u64,
}

impl Default for Regression2DConfig {
    fn default() -> Self {
        Self {
            plane_res: 128,
            channels: 8,
            hidden: 64,
            lift: false,
            keep_fraction: 0.5,
            iterations: 2000,
            batch_size: 2048,
            lr_plane: 0.02,
            lr_mlp: 0.005,
            smoothness: 1e-5,
            grid_init_scale: 0.1,
            seed: 0,
        }
    }
}

impl Regression2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.plane_res < 2 {
            return Err(Error::Config(format!("plane_res must be >= 2, got {}", self.plane_res)));
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(Error::Config(format!("keep_fraction must lie in [0, 1], got {}", self.keep_fraction)));
        }
        if self.channels == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("channels, hidden and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn coord_dim(&self) -> usize {
        if self.lift {
            2 + 4 * LIFT_OCTAVES
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Engagement {
    /// Plane features zeroed before the encoder.
    CoordOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model2D<T> {
    pub config: Regression2DConfig,
    pub plane: FeatureGrid<T>,
    pub mlp: MlpParams<T>,
}

/// Pixel centers in `[0, 1]²`.
fn pixel_coord(x: usize, y: usize, w: usize, h: usize) -> [f64; 2] {
    [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]
}

fn lift_into<T: Real>(s: [f64; 2], lift: bool, out: &mut Vec<T>) {
    out.extend(s.iter().map(|&v| T::of(v)));
    if lift {
        for i in 0..LIFT_OCTAVES {
            let f = (1u32 << i) as f64 * std::f64::consts::PI;
            for &v in &s {
                out.push(T::of((f * v).sin()));
                out.push(T::of((f * v).cos()));
            }
        }
    }
}

impl<T: Real> Model2D<T> {
    pub fn new(config: Regression2DConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = config.plane_res;
        let plane = FeatureGrid::random(config.channels, r, r, config.grid_init_scale, &mut rng);
        let net = NetConfig {
            coord_dim: config.coord_dim(),
            feature_dim: config.channels,
            hidden: config.hidden,
            color_hidden: config.hidden,
            variant: EncoderVariant::Synergy,
            extra_layers: 0,
            view_dependent: false,
        };
        let mlp = MlpParams::random(net, &mut rng)?;
        Ok(Self { config, plane, mlp })
    }

    fn stencil(&self, s: [f64; 2]) -> Result<Stencil<T>> {
        let scale = (self.config.plane_res - 1) as f64;
        self.plane.stencil(T::of(s[1] * scale), T::of(s[0] * scale))
    }

    /// Encoder inputs for a list of normalized coordinates.
    fn inputs(&self, coords: &[[f64; 2]], engagement: Engagement) -> Result<(Array2<T>, Array2<T>, Vec<Stencil<T>>)> {
        let n = coords.len();
        let c = self.config.channels;
        let mut s = Vec::with_capacity(n * self.config.coord_dim());
        let mut f = vec![T::zero(); n * c];
        let mut stencils = Vec::with_capacity(n);
        for (i, &p) in coords.iter().enumerate() {
            lift_into(p, self.config.lift, &mut s);
            let st = self.stencil(p)?;
            if engagement == Engagement::Full {
                for k in 0..c {
                    f[i * c + k] = self.plane.sample(k, &st);
                }
            }
            stencils.push(st);
        }
        let s = Array2::from_shape_vec((n, self.config.coord_dim()), s).expect("sized");
        let f = Array2::from_shape_vec((n, c), f).expect("sized");
        Ok((s, f, stencils))
    }

    /// RGB predictions at normalized coordinates, one row per point.
    pub fn predict(&self, coords: &[[f64; 2]], engagement: Engagement) -> Result<Array2<T>> {
        let (s, f, _) = self.inputs(coords, engagement)?;
        let (h, _) = self.mlp.encode_batch(s.view(), f.view())?;
        Ok(self.mlp.color_batch(h.view(), None)?.0)
    }

    /// Mean squared error and gradients on a batch of (coordinate, target) pairs.
    fn backward(&self, coords: &[[f64; 2]], targets: ArrayView2<T>) -> Result<(f64, FeatureGrid<T>, MlpParams<T>)> {
        let (s, f, stencils) = self.inputs(coords, Engagement::Full)?;
        let (h, enc) = self.mlp.encode_batch(s.view(), f.view())?;
        let (rgb, col) = self.mlp.color_batch(h.view(), None)?;
        let diff = &rgb - &targets;
        let count = T::of(diff.len().max(1) as f64);
        let mse = diff.iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>() / diff.len().max(1) as f64;
        let d_rgb = diff.mapv(|d| T::of(2.0) * d / count);
        let mut g_mlp = self.mlp.zeros_like();
        let dh = self.mlp.color_backward(&col, d_rgb.view(), &mut g_mlp);
        let (_, df) = self.mlp.encode_backward(&enc, dh, &mut g_mlp);
        let mut g_plane = self.plane.zeros_like();
        let c = self.config.channels;
        let len = self.plane.channel_len();
        let data = g_plane.data_mut();
        for (i, st) in stencils.iter().enumerate() {
            for k in 0..c {
                st.scatter(&mut data[k * len..(k + 1) * len], df[[i, k]]);
            }
        }
        Ok((mse, g_plane, g_mlp))
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![("plane".to_string(), self.plane.data_mut())];
        out.extend(self.mlp.tensors_mut());
        out
    }

    fn group_sizes(&self) -> Vec<(String, usize)> {
        let mut out = vec![("plane".to_string(), self.plane.data().len())];
        out.extend(self.mlp.tensors().into_iter().map(|(n, _, v)| (n, v.len())));
        out
    }
}

/// Per-window mean training loss recorded by [`fit2d`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub window: usize,
    pub losses: Vec<f64>,
}

/// Fits the model to the `mask == true` pixels of `target`.
pub fn fit2d<T: Real>(cfg: &Regression2DConfig, target: &Image, mask: &[bool]) -> Result<(Model2D<T>, FitLog)> {
    if mask.len() != target.pixels() {
        return Err(Error::shape("regression mask", target.pixels(), mask.len()));
    }
    let mut model = Model2D::new(cfg.clone())?;
    let mut adam = AdamState::new(AdamConfig::default(), &model.group_sizes());
    let visible: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let (w, h) = (target.width, target.height);
    let mut log = FitLog {
        window: 100,
        losses: Vec::new(),
    };
    let mut window_sum = 0.0;
    for it in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64 + 1);
        let mut loss = 0.0;
        let (mut g_plane, mut g_mlp) = (model.plane.zeros_like(), model.mlp.zeros_like());
        if !visible.is_empty() {
            let n = cfg.batch_size.min(visible.len());
            let mut coords = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(3 * n);
            for _ in 0..n {
                let p = visible[rng.random_range(0..visible.len())];
                coords.push(pixel_coord(p % w, p / w, w, h));
                targets.extend(target.data[3 * p..3 * p + 3].iter().map(|&v| T::of(v)));
            }
            let targets = Array2::from_shape_vec((n, 3), targets).expect("sized");
            (loss, g_plane, g_mlp) = model.backward(&coords, targets.view())?;
        }
        if cfg.smoothness > 0.0 {
            loss += cfg.smoothness * laplacian(&model.plane).to_f64_lossy();
            laplacian_grad(&model.plane, T::of(cfg.smoothness), &mut g_plane);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "regression loss" });
        }
        let mut grads: Vec<(String, Vec<usize>, &[T])> = vec![("plane".into(), Vec::new(), g_plane.data())];
        grads.extend(g_mlp.tensors());
        let (lp, lm) = (cfg.lr_plane, cfg.lr_mlp);
        adam.step(model.groups_mut(), grads, |name| if name == "plane" { lp } else { lm })?;
        window_sum += loss;
        if (it + 1) % log.window == 0 || it + 1 == cfg.iterations {
            let span = (it % log.window) + 1;
            log.losses.push(window_sum / span as f64);
            window_sum = 0.0;
        }
    }
    Ok((model, log))
}

/// Renders the fitted image at its training resolution.
pub fn render_partial<T: Real>(model: &Model2D<T>, width: usize, height: usize, engagement: Engagement) -> Result<Image> {
    let coords: Vec<[f64; 2]> = (0..height)
        .flat_map(|y| (0..width).map(move |x| pixel_coord(x, y, width, height)))
        .collect();
    let rgb = model.predict(&coords, engagement)?;
    Image::new(width, height, rgb.iter().map(|v| v.to_f64_lossy()).collect())
}

/// Mean of `ln(1 + |F|/(HW))` over all bins of the 2D DFT of the luminance.
pub fn avg_magnitude_spectrum(image: &Image) -> Result<f64> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("spectrum of an empty image".into()));
    }
    let mut buf: Vec<Complex<f64>> = image.luminance().into_iter().map(|v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let norm = (w * h) as f64;
    Ok(buf.iter().map(|z| (z.norm() / norm).ln_1p()).sum::<f64>() / norm)
}

/// PSNR over the pixels where `mask` is false.
pub fn heldout_psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let inverse: Vec<bool> = mask.iter().map(|m| !m).collect();
    crate::metrics::masked_psnr(a, b, &inverse)
}
