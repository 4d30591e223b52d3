//! Tensorial feature grids: three spatial planes plus three second factors
//! (1D vectors for static scenes, space-time planes for dynamic scenes).
//!
//! Everything here works in normalized coordinates: every component of a
//! query point lies in `[0, 1]` and maps to lattice coordinate `p * (n - 1)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneMode {
    Static3D,
    Dynamic4D,
}

impl SceneMode {
    /// Length of the raw coordinate vector `s`.
    pub fn coord_dim(self) -> usize {
        match self {
            SceneMode::Static3D => 3,
            SceneMode::Dynamic4D => 4,
        }
    }
}

/// Axes (first, second) each spatial plane is indexed by: xy, yz, zx.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];
/// Spatial axis paired with each plane in the second factor: z, x, y.
pub const FACTOR_AXIS: [usize; 3] = [2, 0, 1];
const TIME_AXIS: usize = 3;

/// Channel-major stack of 2D lattices (`channels × rows × cols`).
///
/// A 1D vector factor is stored with `rows == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self::filled(channels, rows, cols, T::zero())
    }

    pub fn filled(channels: usize, rows: usize, cols: usize, value: T) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![value; channels * rows * cols],
        }
    }

    pub fn from_vec(channels: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * rows * cols;
        if data.len() != expected {
            return Err(Error::shape("FeatureGrid::from_vec", expected, data.len()));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    /// Builds a single-channel grid from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("FeatureGrid::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(1, rows.len(), cols, data)
    }

    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite init scale");
        let data = (0..channels * rows * cols)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self {
            channels,
            rows,
            cols,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.rows, self.cols]
    }

    pub fn channel_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.rows + i) * self.cols + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, value: T) {
        self.data[(c * self.rows + i) * self.cols + j] = value;
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Stencil for lattice position `(x, y)`, `x ∈ [0, rows-1]`, `y ∈ [0, cols-1]`.
    pub fn stencil(&self, x: T, y: T) -> Result<Stencil<T>> {
        Stencil::locate(self.rows, self.cols, x, y)
    }

    /// Interpolated value of one channel.
    pub fn sample(&self, channel: usize, stencil: &Stencil<T>) -> T {
        stencil.apply(self.channel(channel))
    }

    /// Resamples every channel onto a `new_rows × new_cols` lattice that spans
    /// the same normalized extent.
    pub fn resample(&self, new_rows: usize, new_cols: usize) -> Result<Self> {
        if new_rows < self.rows || new_cols < self.cols {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink grid from {}x{} to {}x{}",
                self.rows, self.cols, new_rows, new_cols
            )));
        }
        if new_rows == self.rows && new_cols == self.cols {
            return Ok(self.clone());
        }
        let to_old = |k: usize, old: usize, new: usize| -> T {
            if new <= 1 {
                T::zero()
            } else {
                T::from_usize(k * (old - 1)).unwrap() / T::from_usize(new - 1).unwrap()
            }
        };
        let mut out = Self::zeros(self.channels, new_rows, new_cols);
        for a in 0..new_rows {
            let x = to_old(a, self.rows, new_rows);
            for b in 0..new_cols {
                let y = to_old(b, self.cols, new_cols);
                let st = self.stencil(x, y)?;
                for c in 0..self.channels {
                    let v = st.apply(self.channel(c));
                    out.set(c, a, b, v);
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The (up to) four lattice vertices and weights of one interpolated lookup.
///
/// Offsets index within a single channel; the same stencil serves every
/// channel of a grid, and its weights scatter gradients in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil<T> {
    pub offsets: [usize; 4],
    pub weights: [T; 4],
}

/// Splits a lattice coordinate into a cell index and fraction. At the upper
/// boundary the cell is clamped to `n - 2` with fraction 1. A length-1 axis
/// collapses onto its only vertex.
fn axis_cell<T: Real>(pos: T, n: usize) -> (usize, usize, T) {
    if n <= 1 {
        return (0, 0, T::zero());
    }
    let i = pos.floor().to_usize().unwrap_or(0).min(n - 2);
    let u = pos - T::from_usize(i).unwrap();
    (i, i + 1, u)
}

impl<T: Real> Stencil<T> {
    pub fn locate(rows: usize, cols: usize, x: T, y: T) -> Result<Self> {
        check_range("x", x, rows)?;
        check_range("y", y, cols)?;
        let (i0, i1, u) = axis_cell(x, rows);
        let (j0, j1, v) = axis_cell(y, cols);
        let one = T::one();
        Ok(Self {
            offsets: [i0 * cols + j0, i1 * cols + j0, i0 * cols + j1, i1 * cols + j1],
            weights: [
                (one - u) * (one - v),
                u * (one - v),
                (one - u) * v,
                u * v,
            ],
        })
    }

    #[inline]
    pub fn apply(&self, values: &[T]) -> T {
        self.weights[0] * values[self.offsets[0]]
            + self.weights[1] * values[self.offsets[1]]
            + self.weights[2] * values[self.offsets[2]]
            + self.weights[3] * values[self.offsets[3]]
    }

    #[inline]
    pub fn scatter(&self, values: &mut [T], grad: T) {
        for k in 0..4 {
            values[self.offsets[k]] += self.weights[k] * grad;
        }
    }
}

fn check_range<T: Real>(axis: &'static str, pos: T, n: usize) -> Result<()> {
    let hi = n.saturating_sub(1) as f64;
    let p = pos.to_f64_lossy();
    if !(0.0..=hi).contains(&p) {
        return Err(Error::Domain {
            axis,
            value: p,
            lo: 0.0,
            hi,
        });
    }
    Ok(())
}

/// Bilinear lookup on a single-channel grid at lattice position `(x, y)`.
pub fn interp_bilinear<T: Real>(grid: &FeatureGrid<T>, x: T, y: T) -> Result<T> {
    if grid.channels() != 1 {
        return Err(Error::shape("interp_bilinear channels", 1, grid.channels()));
    }
    Ok(grid.stencil(x, y)?.apply(grid.data()))
}

/// Per-sample interpolation stencils for all six grids of a [`PlaneSet`].
#[derive(Clone, Copy, Debug)]
pub struct SampleStencils<T> {
    pub plane: [Stencil<T>; 3],
    pub factor: [Stencil<T>; 3],
}

/// `f = f^M ⊙ f^V` together with the raw coordinates it was queried at.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T> {
    pub coord: Vec<T>,
    pub plane: Vec<T>,
}

impl<T: Real> FusedFeature<T> {
    /// `coord ⊕ plane`.
    pub fn combined(&self) -> Vec<T> {
        let mut v = self.coord.clone();
        v.extend_from_slice(&self.plane);
        v
    }
}

/// Learnable plane features `M` and second factors `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSet<T> {
    mode: SceneMode,
    channels: usize,
    spatial_res: usize,
    time_res: usize,
    planes: [FeatureGrid<T>; 3],
    factors: [FeatureGrid<T>; 3],
}

impl<T: Real> PlaneSet<T> {
    fn validate_dims(
        mode: SceneMode,
        channels: usize,
        spatial_res: usize,
        time_res: usize,
    ) -> Result<()> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        if spatial_res < 2 {
            return Err(Error::InvalidArgument(format!(
                "spatial resolution must be at least 2, got {spatial_res}"
            )));
        }
        match mode {
            SceneMode::Dynamic4D if time_res < 2 => Err(Error::InvalidArgument(format!(
                "time resolution must be at least 2 for dynamic scenes, got {time_res}"
            ))),
            SceneMode::Static3D if time_res != 1 => Err(Error::InvalidArgument(format!(
                "static scenes have time resolution 1, got {time_res}"
            ))),
            _ => Ok(()),
        }
    }

    fn factor_rows(mode: SceneMode, time_res: usize) -> usize {
        match mode {
            SceneMode::Static3D => 1,
            SceneMode::Dynamic4D => time_res,
        }
    }

    pub fn filled(
        mode: SceneMode,
        channels: usize,
        spatial_res: usize,
        time_res: usize,
        value: T,
    ) -> Result<Self> {
        Self::validate_dims(mode, channels, spatial_res, time_res)?;
        let plane = FeatureGrid::filled(channels, spatial_res, spatial_res, value);
        let rows = Self::factor_rows(mode, time_res);
        let factor = FeatureGrid::filled(channels, rows, spatial_res, value);
        Ok(Self {
            mode,
            channels,
            spatial_res,
            time_res,
            planes: [plane.clone(), plane.clone(), plane],
            factors: [factor.clone(), factor.clone(), factor],
        })
    }

    pub fn zeros(
        mode: SceneMode,
        channels: usize,
        spatial_res: usize,
        time_res: usize,
    ) -> Result<Self> {
        Self::filled(mode, channels, spatial_res, time_res, T::zero())
    }

    /// I.i.d. normal initialization with the given standard deviation.
    pub fn random<R: Rng + ?Sized>(
        mode: SceneMode,
        channels: usize,
        spatial_res: usize,
        time_res: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::validate_dims(mode, channels, spatial_res, time_res)?;
        let rows = Self::factor_rows(mode, time_res);
        let planes = std::array::from_fn(|_| {
            FeatureGrid::random(channels, spatial_res, spatial_res, scale, rng)
        });
        let factors =
            std::array::from_fn(|_| FeatureGrid::random(channels, rows, spatial_res, scale, rng));
        Ok(Self {
            mode,
            channels,
            spatial_res,
            time_res,
            planes,
            factors,
        })
    }

    /// Assembles a plane set from explicit grids, checking every shape invariant.
    pub fn from_grids(
        mode: SceneMode,
        planes: [FeatureGrid<T>; 3],
        factors: [FeatureGrid<T>; 3],
    ) -> Result<Self> {
        let [channels, spatial_res, cols] = planes[0].shape();
        if cols != spatial_res {
            return Err(Error::shape("square plane", spatial_res, cols));
        }
        let time_res = match mode {
            SceneMode::Static3D => 1,
            SceneMode::Dynamic4D => factors[0].rows(),
        };
        Self::validate_dims(mode, channels, spatial_res, time_res)?;
        for p in &planes {
            if p.shape() != [channels, spatial_res, spatial_res] {
                return Err(Error::shape("plane size", channels * spatial_res * spatial_res, p.data().len()));
            }
        }
        let rows = Self::factor_rows(mode, time_res);
        for f in &factors {
            if f.shape() != [channels, rows, spatial_res] {
                return Err(Error::shape("factor size", channels * rows * spatial_res, f.data().len()));
            }
        }
        Ok(Self {
            mode,
            channels,
            spatial_res,
            time_res,
            planes,
            factors,
        })
    }

    pub fn mode(&self) -> SceneMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_res(&self) -> usize {
        self.spatial_res
    }

    pub fn time_res(&self) -> usize {
        self.time_res
    }

    /// Length of the fused plane feature, `3c`.
    pub fn feature_dim(&self) -> usize {
        3 * self.channels
    }

    pub fn planes(&self) -> &[FeatureGrid<T>; 3] {
        &self.planes
    }

    pub fn factors(&self) -> &[FeatureGrid<T>; 3] {
        &self.factors
    }

    pub fn planes_mut(&mut self) -> &mut [FeatureGrid<T>; 3] {
        &mut self.planes
    }

    pub fn factors_mut(&mut self) -> &mut [FeatureGrid<T>; 3] {
        &mut self.factors
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            channels: self.channels,
            spatial_res: self.spatial_res,
            time_res: self.time_res,
            planes: self.planes.clone().map(|g| g.zeros_like()),
            factors: self.factors.clone().map(|g| g.zeros_like()),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.planes.iter().zip(&other.planes).all(|(a, b)| a.same_shape(b))
            && self.factors.iter().zip(&other.factors).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().chain(&self.factors).all(FeatureGrid::is_finite)
    }

    /// Computes the six interpolation stencils for a normalized sample point.
    pub fn locate(&self, s: &[T]) -> Result<SampleStencils<T>> {
        let dim = self.mode.coord_dim();
        if s.len() != dim {
            return Err(Error::shape("sample coordinate", dim, s.len()));
        }
        const AXES: [&str; 4] = ["s_x", "s_y", "s_z", "t"];
        for (k, &v) in s.iter().enumerate() {
            let p = v.to_f64_lossy();
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain {
                    axis: AXES[k],
                    value: p,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        let hs = T::from_usize(self.spatial_res - 1).unwrap();
        let mut plane = [Stencil {
            offsets: [0; 4],
            weights: [T::zero(); 4],
        }; 3];
        let mut factor = plane;
        for k in 0..3 {
            let (a, b) = PLANE_AXES[k];
            plane[k] = self.planes[k].stencil(s[a] * hs, s[b] * hs)?;
            let y = s[FACTOR_AXIS[k]] * hs;
            factor[k] = match self.mode {
                SceneMode::Static3D => self.factors[k].stencil(T::zero(), y)?,
                SceneMode::Dynamic4D => {
                    let ht = T::from_usize(self.time_res - 1).unwrap();
                    self.factors[k].stencil(s[TIME_AXIS] * ht, y)?
                }
            };
        }
        Ok(SampleStencils { plane, factor })
    }

    /// Interpolates all channels and fuses them.
    ///
    /// `fm` and `fv` receive the (optionally γ-weighted) factor features and
    /// `fused` their elementwise product; each has length `3c`.
    pub fn gather(
        &self,
        st: &SampleStencils<T>,
        gamma: Option<&[T]>,
        fm: &mut [T],
        fv: &mut [T],
        fused: &mut [T],
    ) {
        let c = self.channels;
        for k in 0..3 {
            let (pm, pv) = (&self.planes[k], &self.factors[k]);
            for ch in 0..c {
                let mut m = st.plane[k].apply(pm.channel(ch));
                let mut v = st.factor[k].apply(pv.channel(ch));
                if let Some(g) = gamma {
                    m *= g[ch];
                    v *= g[ch];
                }
                let idx = k * c + ch;
                fm[idx] = m;
                fv[idx] = v;
                fused[idx] = m * v;
            }
        }
    }

    /// Adjoint of [`PlaneSet::gather`]: accumulates `d fused` into `grad`
    /// (a zero-initialized set of the same shape).
    pub fn scatter(
        grad: &mut PlaneSet<T>,
        st: &SampleStencils<T>,
        gamma: Option<&[T]>,
        fm: &[T],
        fv: &[T],
        dfused: &[T],
    ) {
        let c = grad.channels;
        for k in 0..3 {
            let n_plane = grad.planes[k].channel_len();
            let n_factor = grad.factors[k].channel_len();
            for ch in 0..c {
                let idx = k * c + ch;
                let g = dfused[idx];
                if g == T::zero() {
                    continue;
                }
                let w = gamma.map_or(T::one(), |gm| gm[ch]);
                let dm = g * fv[idx] * w;
                let dv = g * fm[idx] * w;
                st.plane[k].scatter(
                    &mut grad.planes[k].data[ch * n_plane..(ch + 1) * n_plane],
                    dm,
                );
                st.factor[k].scatter(
                    &mut grad.factors[k].data[ch * n_factor..(ch + 1) * n_factor],
                    dv,
                );
            }
        }
    }

    /// Fused feature for one normalized sample point.
    pub fn query_features(&self, s: &[T]) -> Result<FusedFeature<T>> {
        let st = self.locate(s)?;
        let n = self.feature_dim();
        let (mut fm, mut fv, mut fused) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        self.gather(&st, None, &mut fm, &mut fv, &mut fused);
        Ok(FusedFeature {
            coord: s.to_vec(),
            plane: fused,
        })
    }

    /// Resamples every grid to a finer lattice. `new_t` is ignored for
    /// static scenes.
    pub fn upsample(&self, new_h: usize, new_t: usize) -> Result<Self> {
        if new_h < self.spatial_res {
            return Err(Error::InvalidArgument(format!(
                "spatial resolution cannot shrink ({} -> {new_h})",
                self.spatial_res
            )));
        }
        let new_t = match self.mode {
            SceneMode::Static3D => 1,
            SceneMode::Dynamic4D => {
                if new_t < self.time_res {
                    return Err(Error::InvalidArgument(format!(
                        "time resolution cannot shrink ({} -> {new_t})",
                        self.time_res
                    )));
                }
                new_t
            }
        };
        let rows = Self::factor_rows(self.mode, new_t);
        let mut planes = self.planes.clone();
        let mut factors = self.factors.clone();
        for k in 0..3 {
            planes[k] = self.planes[k].resample(new_h, new_h)?;
            factors[k] = self.factors[k].resample(rows, new_h)?;
        }
        Ok(Self {
            mode: self.mode,
            channels: self.channels,
            spatial_res: new_h,
            time_res: new_t,
            planes,
            factors,
        })
    }

    /// Planes and factors borrowed mutably at the same time.
    pub fn split_mut(&mut self) -> (&mut [FeatureGrid<T>; 3], &mut [FeatureGrid<T>; 3]) {
        (&mut self.planes, &mut self.factors)
    }

    /// All six grids, planes first.
    pub fn grids(&self) -> impl Iterator<Item = &FeatureGrid<T>> {
        self.planes.iter().chain(self.factors.iter())
    }

    pub fn grids_mut(&mut self) -> impl Iterator<Item = &mut FeatureGrid<T>> {
        self.planes.iter_mut().chain(self.factors.iter_mut())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grids_mut().zip(other.grids()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }
}
