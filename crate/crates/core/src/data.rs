//! Datasets: Blender-style camera JSON plus PNGs, sparse-view protocols,
//! analytic ground-truth scenes and 2D regression targets.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SceneMode;
use crate::raster::Image;
use crate::render::{composite, generate_rays, sample_along, Aabb, Camera, Mat4};

/// Training view IDs of the sparse static protocol.
pub const STATIC_SPARSE_IDS: [usize; 9] = [26, 86, 2, 55, 75, 93, 16, 73, 8];
/// Stride of the sparse dynamic protocol.
pub const DYNAMIC_STRIDE: usize = 6;

pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;

/// Every `stride`-th index below `total`, starting from 0.
pub fn strided_ids(total: usize, stride: usize) -> Vec<usize> {
    (0..total).step_by(stride.max(1)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Per-view time in `[0, 1]`; present exactly for dynamic scenes.
    pub times: Option<Vec<f64>>,
    pub split: Split,
    pub bbox: Aabb,
}

impl SceneDataset {
    pub fn new(
        cameras: Vec<Camera>,
        images: Vec<Image>,
        times: Option<Vec<f64>>,
        split: Split,
        bbox: Aabb,
    ) -> Result<Self> {
        let ds = Self {
            cameras,
            images,
            times,
            split,
            bbox,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Validation("dataset has no views".into()));
        }
        if self.cameras.len() != self.images.len() {
            return Err(Error::Validation(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        if let Some(t) = &self.times {
            if t.len() != self.cameras.len() {
                return Err(Error::Validation(format!("{} cameras but {} times", self.cameras.len(), t.len())));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("times must lie in [0, 1]".into()));
            }
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            cam.validate()?;
            if cam.width != img.width || cam.height != img.height {
                return Err(Error::Validation(format!(
                    "view {i}: camera is {}x{} but image is {}x{}",
                    cam.width, cam.height, img.width, img.height
                )));
            }
            if !img.in_unit_range() {
                return Err(Error::Validation(format!("view {i}: pixel values outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> SceneMode {
        if self.times.is_some() {
            SceneMode::Dynamic4D
        } else {
            SceneMode::Static3D
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn time(&self, view: usize) -> Option<f64> {
        self.times.as_ref().map(|t| t[view])
    }

    /// The views at `ids`, in the given order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "view id {bad} out of range for {} views",
                self.len()
            )));
        }
        Self::new(
            ids.iter().map(|&i| self.cameras[i].clone()).collect(),
            ids.iter().map(|&i| self.images[i].clone()).collect(),
            self.times.as_ref().map(|t| ids.iter().map(|&i| t[i]).collect()),
            self.split,
            self.bbox,
        )
    }

    /// Sparse training views: the fixed static ID list, or every sixth frame
    /// for dynamic scenes.
    pub fn sparse_protocol(&self) -> Result<Self> {
        match self.mode() {
            SceneMode::Static3D => self.select(&STATIC_SPARSE_IDS),
            SceneMode::Dynamic4D => self.select(&strided_ids(self.len(), DYNAMIC_STRIDE)),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: Mat4,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
}

fn transforms_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("transforms_{}.json", split.name()))
}

fn frame_image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Loads `transforms_{split}.json` and its images from `dir`.
///
/// Images are composited onto white and box-downscaled by `downscale`. Frame
/// times outside `[0, 1]` are min-max normalized.
pub fn load_blender(dir: &Path, split: Split, downscale: usize, bbox: Aabb) -> Result<SceneDataset> {
    let path = transforms_path(dir, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let file: TransformsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if file.frames.is_empty() {
        return Err(Error::Validation(format!("{} lists no frames", path.display())));
    }
    let timed = file.frames.iter().filter(|f| f.time.is_some()).count();
    if timed != 0 && timed != file.frames.len() {
        return Err(Error::Validation(format!(
            "{timed} of {} frames carry a time",
            file.frames.len()
        )));
    }
    let images: Vec<Image> = file
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let p = frame_image_path(dir, &frame.file_path);
            if !p.is_file() {
                return Err(Error::Validation(format!("frame {i}: image {} not found", p.display())));
            }
            Image::load_png(&p, [1.0; 3])?.downscale(downscale)
        })
        .collect::<Result<_>>()?;
    let (near, far) = (file.near.unwrap_or(DEFAULT_NEAR), file.far.unwrap_or(DEFAULT_FAR));
    let cameras = file
        .frames
        .iter()
        .zip(&images)
        .map(|(frame, img)| Camera {
            width: img.width,
            height: img.height,
            camera_angle_x: file.camera_angle_x,
            c2w: frame.transform_matrix,
            near,
            far,
        })
        .collect();
    let times = (timed > 0).then(|| normalize_times(file.frames.iter().map(|f| f.time.unwrap_or(0.0)).collect()));
    SceneDataset::new(cameras, images, times, split, bbox)
}

fn normalize_times(t: Vec<f64>) -> Vec<f64> {
    if t.iter().all(|v| (0.0..=1.0).contains(v)) {
        return t;
    }
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.into_iter().map(|v| (v - lo) / span).collect()
}

/// Writes `dataset` as `transforms_{split}.json` plus `{split}/r_{i}.png`.
pub fn write_blender(dir: &Path, dataset: &SceneDataset) -> Result<()> {
    let split = dataset.split.name();
    fs::create_dir_all(dir.join(split))?;
    let first = &dataset.cameras[0];
    let mut frames = Vec::with_capacity(dataset.len());
    for (i, (cam, img)) in dataset.cameras.iter().zip(&dataset.images).enumerate() {
        let rel = format!("./{split}/r_{i}");
        img.save_png(&frame_image_path(dir, &rel))?;
        frames.push(FrameEntry {
            file_path: rel,
            transform_matrix: cam.c2w,
            time: dataset.time(i),
        });
    }
    let file = TransformsFile {
        camera_angle_x: first.camera_angle_x,
        near: Some(first.near),
        far: Some(first.far),
        frames,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(transforms_path(dir, dataset.split), json)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Center at time 0.
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub density: f64,
    /// Displacement per unit time; the center at time `t` is `center + t * velocity`.
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl Primitive {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + t * self.velocity[k])
    }

    /// Signed distance, negative inside.
    fn signed_distance(&self, p: [f64; 3], t: f64) -> f64 {
        let c = self.center_at(t);
        let d: [f64; 3] = std::array::from_fn(|k| p[k] - c[k]);
        match self.shape {
            Shape::Sphere { radius } => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius,
            Shape::Box { half } => {
                let q: [f64; 3] = std::array::from_fn(|k| d[k].abs() - half[k]);
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    fn extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
        }
    }
}

/// Ground-truth scene built from soft-edged primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Width of the density falloff at primitive boundaries.
    pub edge: f64,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge > 0.0) {
            return Err(Error::InvalidArgument("edge width must be positive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::InvalidArgument(format!("primitive {i}: negative density")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument(format!("primitive {i}: color outside [0, 1]")));
            }
            let ext = p.extent();
            for t in [0.0, 1.0] {
                let c = p.center_at(t);
                if (0..3).any(|k| c[k] - ext[k] < -1.0 || c[k] + ext[k] > 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "primitive {i} leaves the unit box at t={t}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_dynamic(&self) -> bool {
        self.primitives.iter().any(|p| p.velocity != [0.0; 3])
    }

    /// Three colored spheres of different sizes.
    pub fn three_spheres() -> Self {
        let sphere = |center, radius, color| Primitive {
            shape: Shape::Sphere { radius },
            center,
            color,
            density: 40.0,
            velocity: [0.0; 3],
        };
        Self {
            primitives: vec![
                sphere([-0.35, -0.25, -0.1], 0.45, [0.9, 0.2, 0.15]),
                sphere([0.4, 0.1, 0.05], 0.35, [0.15, 0.75, 0.25]),
                sphere([-0.05, 0.45, 0.35], 0.3, [0.2, 0.3, 0.9]),
            ],
            background: [1.0; 3],
            edge: 0.02,
        }
    }

    /// A sphere crossing the box over the unit time interval next to a
    /// static box.
    pub fn moving_sphere() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.35 },
                    center: [-0.5, -0.2, 0.0],
                    color: [0.9, 0.35, 0.1],
                    density: 40.0,
                    velocity: [1.0, 0.4, 0.0],
                },
                Primitive {
                    shape: Shape::Box { half: [0.25, 0.25, 0.25] },
                    center: [0.0, 0.45, -0.4],
                    color: [0.2, 0.4, 0.85],
                    density: 40.0,
                    velocity: [0.0; 3],
                },
            ],
            background: [1.0; 3],
            edge: 0.02,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "spheres" => Ok(Self::three_spheres()),
            "moving-sphere" => Ok(Self::moving_sphere()),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene {other:?}; expected spheres or moving-sphere"
            ))),
        }
    }

    /// Density and color at `p` and time `t`.
    pub fn field(&self, p: [f64; 3], t: f64) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in &self.primitives {
            let z = -prim.signed_distance(p, t) / self.edge;
            let occ = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
            let s = prim.density * occ;
            sigma += s;
            for c in 0..3 {
                rgb[c] += s * prim.color[c];
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|v| v / sigma);
        }
        (sigma, rgb)
    }
}

/// Renders the analytic scene with `n_samples` midpoint samples per ray.
pub fn render_analytic(scene: &AnalyticScene, cam: &Camera, time: f64, n_samples: usize) -> Result<Image> {
    cam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rs = sample_along(n_samples, cam.near, cam.far, false, &mut rng);
    let rows: Vec<Vec<f64>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let pixels: Vec<_> = (0..cam.width).map(|x| (x, y)).collect();
            let rays = generate_rays(cam, &pixels)?;
            let mut row = Vec::with_capacity(3 * cam.width);
            let mut sig = vec![0.0; rs.depths.len()];
            let mut col = vec![0.0; 3 * rs.depths.len()];
            for ray in rays {
                for (k, &tau) in rs.depths.iter().enumerate() {
                    let (s, c) = scene.field(ray.at(tau), time);
                    sig[k] = s;
                    col[3 * k..3 * k + 3].copy_from_slice(&c);
                }
                let (rgb, _) = composite(&sig, &col, &rs.deltas, scene.background)?;
                row.extend(rgb.map(|v| v.clamp(0.0, 1.0)));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Image::new(cam.width, cam.height, rows.concat())
}

/// Cameras looking at the origin from a spherical band, spread with the
/// golden angle; `phase` rotates the whole set about the vertical axis.
pub fn orbit_cameras(n: usize, radius: f64, size: usize, camera_angle_x: f64, phase: f64) -> Vec<Camera> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = -0.35 + 1.2 * (i as f64 + 0.5) / n as f64;
            let z = z.min(0.9);
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * golden + phase;
            let eye = [radius * r * phi.cos(), radius * r * phi.sin(), radius * z];
            Camera::look_at(eye, [0.0; 3], size, size, camera_angle_x, DEFAULT_NEAR, DEFAULT_FAR)
        })
        .collect()
}

/// Renders a dataset of `scene` from the given cameras (and times, for
/// dynamic scenes).
pub fn synthesize(
    scene: &AnalyticScene,
    cameras: Vec<Camera>,
    times: Option<Vec<f64>>,
    n_samples: usize,
    split: Split,
) -> Result<SceneDataset> {
    scene.validate()?;
    let images = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| render_analytic(scene, cam, times.as_ref().map_or(0.0, |t| t[i]), n_samples))
        .collect::<Result<_>>()?;
    SceneDataset::new(cameras, images, times, split, Aabb::cube(1.0))
}

/// `n` times evenly spaced over `[0, 1]`.
pub fn uniform_times(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Procedural plaid: per-channel sums of horizontal and vertical sinusoids
/// plus a faint diagonal high-frequency component. Values lie in `[0, 1]`.
pub fn plaid(size: usize) -> Image {
    let freq = [(2.0, 3.0), (3.0, 1.0), (1.0, 4.0)];
    let phase = [(0.0, 0.6), (1.3, 2.1), (2.4, 0.9)];
    Image::from_fn(size, size, |x, y| {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        std::array::from_fn(|c| {
            let (fx, fy) = freq[c];
            let (px, py) = phase[c];
            let base = 0.5 + 0.2 * (2.0 * PI * fx * u + px).sin() + 0.2 * (2.0 * PI * fy * v + py).sin();
            base + 0.05 * (2.0 * PI * 12.0 * (u + v) + c as f64).sin()
        })
    })
}

/// I.i.d. Bernoulli(`keep`) pixel mask; `true` marks training pixels.
pub fn bernoulli_mask(pixels: usize, keep: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pixels).map(|_| rng.random::<f64>() < keep).collect()
}
