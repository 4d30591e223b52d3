//! Pinhole cameras, ray sampling and the volume-rendering quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    /// Camera-to-world transform (OpenGL convention, camera looks down -z).
    pub c2w: Mat4,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl Ray {
    pub fn at(&self, tau: f64) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + tau * self.direction[k])
    }
}

/// Axis-aligned scene box mapped onto the unit cube for grid queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    /// Normalized position, or `None` if `p` lies outside the box.
    pub fn normalize(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let u = (p[k] - self.min[k]) / (self.max[k] - self.min[k]);
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            out[k] = u;
        }
        Some(out)
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.camera_angle_x > 0.0 && self.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!(
                "camera_angle_x must be in (0, π), got {}",
                self.camera_angle_x
            )));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| self.c2w[k][a] * self.c2w[k][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-4 {
                    return Err(Error::InvalidArgument("c2w rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.camera_angle_x).tan()
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Camera at `eye` looking at `target` with world up `+z`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        width: usize,
        height: usize,
        camera_angle_x: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let back = normalize(sub(eye, target));
        let mut up = [0.0, 0.0, 1.0];
        if cross(up, back).iter().all(|v| v.abs() < 1e-9) {
            up = [0.0, 1.0, 0.0];
        }
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let mut c2w = [[0.0; 4]; 4];
        for k in 0..3 {
            c2w[k] = [right[k], true_up[k], back[k], eye[k]];
        }
        c2w[3] = [0.0, 0.0, 0.0, 1.0];
        Self {
            width,
            height,
            camera_angle_x,
            c2w,
            near,
            far,
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rays through the centers of the given `(x, y)` pixels.
pub fn generate_rays(cam: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    if !(cam.camera_angle_x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "camera_angle_x must be positive, got {}",
            cam.camera_angle_x
        )));
    }
    let focal = cam.focal();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let origin = cam.origin();
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= cam.width || y >= cam.height {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({x}, {y}) outside {}x{} image",
                    cam.width, cam.height
                )));
            }
            let d = [
                (x as f64 + 0.5 - w / 2.0) / focal,
                -(y as f64 + 0.5 - h / 2.0) / focal,
                -1.0,
            ];
            let world = std::array::from_fn(|r| (0..3).map(|k| cam.c2w[r][k] * d[k]).sum());
            Ok(Ray {
                origin,
                direction: normalize(world),
            })
        })
        .collect()
}

/// Every pixel in row-major order.
pub fn image_rays(cam: &Camera) -> Result<Vec<Ray>> {
    let pixels: Vec<_> = (0..cam.height)
        .flat_map(|y| (0..cam.width).map(move |x| (x, y)))
        .collect();
    generate_rays(cam, &pixels)
}

/// Depths and interval widths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// `n` depths on `[near, far]`, one per equal-width bin.
///
/// Deterministic sampling takes bin midpoints with every interval equal to
/// the bin width. Stratified sampling jitters uniformly within each bin and
/// uses the gaps between consecutive samples, the last one running to `far`.
pub fn sample_along<R: Rng + ?Sized>(
    n: usize,
    near: f64,
    far: f64,
    stratified: bool,
    rng: &mut R,
) -> RaySamples {
    let n = n.max(1);
    let width = (far - near) / n as f64;
    if !stratified {
        return RaySamples {
            depths: (0..n).map(|k| near + (k as f64 + 0.5) * width).collect(),
            deltas: vec![width; n],
        };
    }
    let depths: Vec<f64> = (0..n)
        .map(|k| near + (k as f64 + rng.random::<f64>()) * width)
        .collect();
    let deltas = (0..n)
        .map(|k| if k + 1 < n { depths[k + 1] - depths[k] } else { far - depths[k] })
        .collect();
    RaySamples { depths, deltas }
}

/// Samples for a batch of rays, flattened ray-major.
#[derive(Clone, Debug)]
pub struct RaySampleBatch {
    pub n_rays: usize,
    pub n_samples: usize,
    pub rays: Vec<Ray>,
    /// Per-ray time in `[0, 1]` for dynamic scenes.
    pub times: Option<Vec<f64>>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Normalized coordinates (3 or 4 per sample); meaningless where `inside` is false.
    pub coords: Vec<f64>,
    pub coord_dim: usize,
    /// Whether each sample lies inside the scene box.
    pub inside: Vec<bool>,
}

impl RaySampleBatch {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        rays: Vec<Ray>,
        times: Option<Vec<f64>>,
        n_samples: usize,
        near: f64,
        far: f64,
        bbox: &Aabb,
        stratified: bool,
        rng: &mut R,
    ) -> Self {
        let coord_dim = if times.is_some() { 4 } else { 3 };
        let n_rays = rays.len();
        let total = n_rays * n_samples;
        let mut depths = Vec::with_capacity(total);
        let mut deltas = Vec::with_capacity(total);
        let mut coords = Vec::with_capacity(total * coord_dim);
        let mut inside = Vec::with_capacity(total);
        for (r, ray) in rays.iter().enumerate() {
            let rs = sample_along(n_samples, near, far, stratified, rng);
            for (&tau, &delta) in rs.depths.iter().zip(&rs.deltas) {
                depths.push(tau);
                deltas.push(delta);
                match bbox.normalize(ray.at(tau)) {
                    Some(u) => {
                        coords.extend_from_slice(&u);
                        inside.push(true);
                    }
                    None => {
                        coords.extend_from_slice(&[0.0; 3]);
                        inside.push(false);
                    }
                }
                if let Some(t) = &times {
                    coords.push(t[r].clamp(0.0, 1.0));
                }
            }
        }
        Self {
            n_rays,
            n_samples: n_samples.max(1),
            rays,
            times,
            depths,
            deltas,
            coords,
            coord_dim,
            inside,
        }
    }
}

/// Volume-rendering result for one ray with what the adjoint needs.
#[derive(Clone, Debug)]
pub struct Composite<T> {
    pub rgb: [T; 3],
    pub acc: T,
    pub weights: Vec<T>,
    /// Transmittance past the last sample.
    pub trans_end: T,
}

/// `w_k = T_k (1 - e^{-σ_k δ_k})`, capped at `1 - Σ_{m<k} w_m`; color
/// `Σ w_k c_k + (1 - Σ w_k) bg`.
/// `colors` holds three entries per sample.
pub fn composite_full<T: Real>(
    sigmas: &[T],
    colors: &[T],
    deltas: &[T],
    background: [T; 3],
) -> Result<Composite<T>> {
    let n = sigmas.len();
    if colors.len() != 3 * n {
        return Err(Error::shape("composite colors", 3 * n, colors.len()));
    }
    if deltas.len() != n {
        return Err(Error::shape("composite deltas", n, deltas.len()));
    }
    let mut weights = Vec::with_capacity(n);
    let mut optical = T::zero();
    let mut rgb = [T::zero(); 3];
    let mut acc = T::zero();
    for k in 0..n {
        let sigma = sigmas[k];
        if !(sigma >= T::zero()) {
            return Err(Error::Domain {
                axis: "density",
                value: sigma.to_f64_lossy(),
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let tau = sigma * deltas[k];
        let w = ((-optical).exp() * -(-tau).exp_m1()).min(T::one() - acc);
        optical += tau;
        for ch in 0..3 {
            rgb[ch] += w * colors[3 * k + ch];
        }
        acc += w;
        weights.push(w);
    }
    for ch in 0..3 {
        rgb[ch] += (T::one() - acc) * background[ch];
    }
    Ok(Composite {
        rgb,
        acc,
        weights,
        trans_end: (-optical).exp(),
    })
}

/// Composited `(rgb, accumulated opacity)`.
pub fn composite<T: Real>(
    sigmas: &[T],
    colors: &[T],
    deltas: &[T],
    background: [T; 3],
) -> Result<([T; 3], T)> {
    let c = composite_full(sigmas, colors, deltas, background)?;
    Ok((c.rgb, c.acc))
}

/// Adjoint of [`composite_full`] with respect to densities and colors.
/// Overwrites `d_sigma` (length n) and `d_color` (length 3n).
pub fn composite_backward<T: Real>(
    forward: &Composite<T>,
    sigmas: &[T],
    colors: &[T],
    deltas: &[T],
    background: [T; 3],
    d_rgb: [T; 3],
    d_sigma: &mut [T],
    d_color: &mut [T],
) {
    let n = sigmas.len();
    let dot = |c: &[T]| d_rgb[0] * c[0] + d_rgb[1] * c[1] + d_rgb[2] * c[2];
    let bg_term = forward.trans_end * dot(&background);
    // Σ_{m>k} w_m (g·c_m), accumulated from the back.
    let mut tail = T::zero();
    let mut optical_after: Vec<T> = Vec::with_capacity(n);
    let mut optical = T::zero();
    for k in 0..n {
        optical += sigmas[k] * deltas[k];
        optical_after.push(optical);
    }
    for k in (0..n).rev() {
        let ck = &colors[3 * k..3 * k + 3];
        let w = forward.weights[k];
        for ch in 0..3 {
            d_color[3 * k + ch] = w * d_rgb[ch];
        }
        let trans_next = (-optical_after[k]).exp();
        d_sigma[k] = deltas[k] * (trans_next * dot(ck) - tail - bg_term);
        tail += w * dot(ck);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(w: usize, h: usize, angle: f64) -> Camera {
        let mut c2w = [[0.0; 4]; 4];
        for k in 0..4 {
            c2w[k][k] = 1.0;
        }
        Camera {
            width: w,
            height: h,
            camera_angle_x: angle,
            c2w,
            near: 2.0,
            far: 6.0,
        }
    }

    #[test]
    fn center_pixel_looks_down_axis() {
        let cam = identity_cam(5, 5, 0.8);
        let r = generate_rays(&cam, &[(2, 2)]).unwrap();
        assert_eq!(r[0].direction, [0.0, 0.0, -1.0]);
        assert_eq!(r[0].origin, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn focal_from_angle() {
        let cam = identity_cam(800, 800, std::f64::consts::FRAC_PI_2);
        assert!((cam.focal() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn corner_ray_matches_explicit_rotation() {
        let cam = Camera::look_at([1.0, -3.0, 2.0], [0.0; 3], 7, 5, 0.7, 1.0, 6.0);
        cam.validate().unwrap();
        let r = generate_rays(&cam, &[(6, 4)]).unwrap()[0];
        let f = cam.focal();
        let d = [(6.5 - 3.5) / f, -(4.5 - 2.5) / f, -1.0];
        let mut world = [0.0; 3];
        for row in 0..3 {
            for col in 0..3 {
                world[row] += cam.c2w[row][col] * d[col];
            }
        }
        let norm = (world[0].powi(2) + world[1].powi(2) + world[2].powi(2)).sqrt();
        for k in 0..3 {
            assert!((r.direction[k] - world[k] / norm).abs() < 1e-12);
        }
        let len: f64 = r.direction.iter().map(|v| v * v).sum();
        assert!((len - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_cameras_rejected() {
        let mut cam = identity_cam(4, 4, 0.0);
        assert!(generate_rays(&cam, &[(0, 0)]).is_err());
        cam.camera_angle_x = 0.5;
        assert!(generate_rays(&cam, &[(4, 0)]).is_err());
        cam.c2w[0][0] = 2.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn deterministic_samples_are_bin_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_along(2, 0.0, 1.0, false, &mut rng);
        assert_eq!(s.depths, vec![0.25, 0.75]);
        assert_eq!(s.deltas, vec![0.5, 0.5]);
        let s = sample_along(1, 2.0, 6.0, false, &mut rng);
        assert_eq!(s.depths, vec![4.0]);
        assert_eq!(s.deltas, vec![4.0]);
    }

    #[test]
    fn stratified_samples_stay_in_bins() {
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_along(8, 2.0, 6.0, true, &mut rng);
            for (k, &tau) in s.depths.iter().enumerate() {
                let lo = 2.0 + k as f64 * 0.5;
                assert!(tau >= lo && tau < lo + 0.5);
            }
            assert!(s.deltas.iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn transparent_gives_background() {
        let (rgb, acc) = composite(&[0.0; 4], &[0.3; 12], &[0.25; 4], [1.0; 3]).unwrap();
        assert_eq!(rgb, [1.0; 3]);
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn half_opacity_sample() {
        let ln2 = 2f64.ln();
        let (rgb, acc) = composite(&[ln2], &[1.0, 0.0, 0.0], &[1.0], [0.0; 3]).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);
        assert!((rgb[0] - 0.5).abs() < 1e-15);
        assert_eq!(rgb[1], 0.0);
    }

    #[test]
    fn negative_density_rejected() {
        assert!(matches!(
            composite(&[-1.0], &[0.0; 3], &[1.0], [0.0; 3]),
            Err(Error::Domain { axis: "density", .. })
        ));
    }

    #[test]
    fn appending_empty_samples_is_noop() {
        let sig = [0.4f64, 2.0, 0.1];
        let col = [0.1, 0.2, 0.3, 0.9, 0.8, 0.7, 0.5, 0.5, 0.5];
        let del = [0.3, 0.2, 0.5];
        let a = composite(&sig, &col, &del, [1.0; 3]).unwrap();
        let b = composite(
            &[0.4, 2.0, 0.1, 0.0, 0.0],
            &[&col[..], &[0.4; 6][..]].concat(),
            &[0.3, 0.2, 0.5, 0.7, 0.1],
            [1.0; 3],
        )
        .unwrap();
        for ch in 0..3 {
            assert!((a.0[ch] - b.0[ch]).abs() < 1e-15);
        }
        assert!((a.1 - b.1).abs() < 1e-15);
    }

    #[test]
    fn splitting_a_sample_is_exact_for_constant_color() {
        // Two half-width samples with equal σ and color reproduce one full sample.
        let a = composite(&[1.3f64], &[0.2, 0.4, 0.6], &[0.5], [1.0; 3]).unwrap();
        let b = composite(&[1.3, 1.3], &[0.2, 0.4, 0.6, 0.2, 0.4, 0.6], &[0.25, 0.25], [1.0; 3]).unwrap();
        for ch in 0..3 {
            assert!((a.0[ch] - b.0[ch]).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let col: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let bg = [0.9, 0.2, 0.5];
        let g = [0.7, -1.1, 0.4];
        let f = |s: &[f64], c: &[f64]| {
            let (rgb, _) = composite(s, c, &del, bg).unwrap();
            g[0] * rgb[0] + g[1] * rgb[1] + g[2] * rgb[2]
        };
        let fwd = composite_full(&sig, &col, &del, bg).unwrap();
        let (mut ds, mut dc) = (vec![0.0; n], vec![0.0; 3 * n]);
        composite_backward(&fwd, &sig, &col, &del, bg, g, &mut ds, &mut dc);
        let h = 1e-6;
        for k in 0..n {
            let (mut p, mut m) = (sig.clone(), sig.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (f(&p, &col) - f(&m, &col)) / (2.0 * h);
            assert!((fd - ds[k]).abs() < 1e-8, "sigma {k}: {fd} vs {}", ds[k]);
        }
        for k in 0..3 * n {
            let (mut p, mut m) = (col.clone(), col.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (f(&sig, &p) - f(&sig, &m)) / (2.0 * h);
            assert!((fd - dc[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_marks_samples_outside_box() {
        let cam = Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], 3, 3, 0.6, 2.0, 6.0);
        let rays = generate_rays(&cam, &[(1, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = RaySampleBatch::build(rays, Some(vec![0.25]), 8, 2.0, 6.0, &Aabb::cube(1.0), false, &mut rng);
        assert_eq!(b.coord_dim, 4);
        // Depths 2.25..5.75 step 0.5; the box spans depths [3, 5].
        let inside: Vec<bool> = b.depths.iter().map(|&d| (3.0..=5.0).contains(&d)).collect();
        assert_eq!(b.inside, inside);
        assert_eq!(b.coords[3], 0.25);
    }
}
