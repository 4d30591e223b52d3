//! Forward pipeline and its hand-derived adjoint:
//! grid lookup → curriculum weights → fusion → encoder → heads →
//! compositing → loss.
//!
//! Rays are processed in fixed-size chunks. Each chunk accumulates into its
//! own gradient buffer and the buffers are summed in chunk order, so results
//! do not depend on how many threads ran the chunks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{FeatureInputs, FieldModel, GradStore};
use crate::grid::{PlaneSet, SampleStencils};
use crate::loss::{loss_terms, regularizer_grad, LossTerms, LossWeights};
use crate::raster::Image;
use crate::real::Real;
use crate::render::{composite_backward, composite_full, image_rays, Aabb, Camera, RaySampleBatch};

/// Rays per work unit.
pub const RAY_CHUNK: usize = 64;

/// Rendered colors (3 per ray) and accumulated opacities.
#[derive(Clone, Debug)]
pub struct Rendered<T> {
    pub rgb: Vec<T>,
    pub acc: Vec<T>,
}

struct ChunkOut<T> {
    rgb: Vec<T>,
    acc: Vec<T>,
    sq_err: T,
    grad: Option<GradStore<T>>,
}

fn check_finite<T: Real>(values: impl IntoIterator<Item = T>, stage: &'static str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

struct ChunkArgs<'a, T> {
    model: &'a FieldModel<T>,
    samples: &'a RaySampleBatch,
    gamma: Option<&'a [T]>,
    background: [T; 3],
    targets: Option<&'a [f64]>,
    total_rays: usize,
    want_grad: bool,
}

fn run_chunk<T: Real>(args: &ChunkArgs<'_, T>, r0: usize, r1: usize) -> Result<ChunkOut<T>> {
    let model = args.model;
    let samples = args.samples;
    let n = samples.n_samples;
    let ds = model.mode().coord_dim();
    let c3 = model.planes.feature_dim();
    let inputs = model.config.inputs;
    let use_planes = inputs != FeatureInputs::CoordsOnly;

    let valid: Vec<usize> = (r0 * n..r1 * n).filter(|&i| samples.inside[i]).collect();
    let m = valid.len();
    let mut row_of = vec![usize::MAX; (r1 - r0) * n];
    for (row, &i) in valid.iter().enumerate() {
        row_of[i - r0 * n] = row;
    }

    let mut coords = Array2::<T>::zeros((m, ds));
    let mut feats = Array2::<T>::zeros((m, c3));
    let mut stencils: Vec<SampleStencils<T>> = Vec::with_capacity(if use_planes { m } else { 0 });
    let mut fm = vec![T::zero(); if use_planes { m * c3 } else { 0 }];
    let mut fv = fm.clone();
    let mut s = vec![T::zero(); ds];
    for (row, &i) in valid.iter().enumerate() {
        for (k, v) in s.iter_mut().enumerate() {
            *v = T::of(samples.coords[i * ds + k]);
        }
        if inputs != FeatureInputs::PlanesOnly {
            for k in 0..ds {
                coords[[row, k]] = s[k];
            }
        }
        if use_planes {
            let st = model.planes.locate(&s)?;
            let mut frow = feats.row_mut(row);
            let fused = frow.as_slice_mut().expect("row-major");
            model.planes.gather(
                &st,
                args.gamma,
                &mut fm[row * c3..(row + 1) * c3],
                &mut fv[row * c3..(row + 1) * c3],
                fused,
            );
            stencils.push(st);
        }
    }
    check_finite(feats.iter().copied(), "features")?;

    let (hidden, enc_cache) = model.mlp.encode_batch(coords.view(), feats.view())?;
    check_finite(hidden.iter().copied(), "encoder")?;
    let sigma: Vec<T> = hidden.column(0).iter().map(|&h| h.softplus()).collect();
    let viewdirs = model.config.view_dependent.then(|| {
        let mut d = Array2::<T>::zeros((m, 3));
        for (row, &i) in valid.iter().enumerate() {
            let dir = samples.rays[i / n].direction;
            for k in 0..3 {
                d[[row, k]] = T::of(dir[k]);
            }
        }
        d
    });
    let (colors, color_cache) = model
        .mlp
        .color_batch(hidden.view(), viewdirs.as_ref().map(|d| d.view()))?;
    check_finite(colors.iter().copied(), "color head")?;

    let rays = r1 - r0;
    let mut out = ChunkOut {
        rgb: Vec::with_capacity(3 * rays),
        acc: Vec::with_capacity(rays),
        sq_err: T::zero(),
        grad: None,
    };
    let (mut d_sigma, mut d_colors) = if args.want_grad {
        (vec![T::zero(); m], Array2::<T>::zeros((m, 3)))
    } else {
        (Vec::new(), Array2::zeros((0, 3)))
    };
    let scale = T::of(2.0) / T::from_usize(args.total_rays.max(1)).unwrap();
    let (mut sig, mut col, mut del) = (vec![T::zero(); n], vec![T::zero(); 3 * n], vec![T::zero(); n]);
    let (mut dsig, mut dcol) = (vec![T::zero(); n], vec![T::zero(); 3 * n]);
    for r in r0..r1 {
        for k in 0..n {
            let i = r * n + k;
            del[k] = T::of(samples.deltas[i]);
            let row = row_of[i - r0 * n];
            if row == usize::MAX {
                sig[k] = T::zero();
                col[3 * k..3 * k + 3].fill(T::zero());
            } else {
                sig[k] = sigma[row];
                for ch in 0..3 {
                    col[3 * k + ch] = colors[[row, ch]];
                }
            }
        }
        let comp = composite_full(&sig, &col, &del, args.background)?;
        out.rgb.extend_from_slice(&comp.rgb);
        out.acc.push(comp.acc);
        if let Some(t) = args.targets {
            let mut d_rgb = [T::zero(); 3];
            for ch in 0..3 {
                let diff = comp.rgb[ch] - T::of(t[3 * r + ch]);
                out.sq_err += diff * diff;
                d_rgb[ch] = scale * diff;
            }
            if args.want_grad {
                composite_backward(&comp, &sig, &col, &del, args.background, d_rgb, &mut dsig, &mut dcol);
                for k in 0..n {
                    let row = row_of[r * n + k - r0 * n];
                    if row != usize::MAX {
                        d_sigma[row] = dsig[k];
                        for ch in 0..3 {
                            d_colors[[row, ch]] = dcol[3 * k + ch];
                        }
                    }
                }
            }
        }
    }
    check_finite(out.rgb.iter().copied(), "composite")?;

    if args.want_grad && args.targets.is_some() {
        let mut grad = GradStore::zeros_for(model);
        let mut d_hidden = model.mlp.color_backward(&color_cache, d_colors.view(), &mut grad.mlp);
        for row in 0..m {
            d_hidden[[row, 0]] += d_sigma[row] * hidden[[row, 0]].sigmoid();
        }
        let (_, d_feats) = model.mlp.encode_backward(&enc_cache, d_hidden, &mut grad.mlp);
        if use_planes {
            for (row, st) in stencils.iter().enumerate() {
                let dfr = d_feats.row(row);
                PlaneSet::scatter(
                    &mut grad.planes,
                    st,
                    args.gamma,
                    &fm[row * c3..(row + 1) * c3],
                    &fv[row * c3..(row + 1) * c3],
                    dfr.as_slice().expect("row-major"),
                );
            }
        }
        out.grad = Some(grad);
    }
    Ok(out)
}

fn run<T: Real>(args: &ChunkArgs<'_, T>) -> Result<Vec<ChunkOut<T>>> {
    let samples = args.samples;
    if samples.coord_dim != args.model.mode().coord_dim() {
        return Err(Error::shape(
            "sample coordinates vs scene mode",
            args.model.mode().coord_dim(),
            samples.coord_dim,
        ));
    }
    if let Some(t) = args.targets {
        if t.len() != 3 * samples.n_rays {
            return Err(Error::shape("target colors", 3 * samples.n_rays, t.len()));
        }
    }
    if let Some(g) = args.gamma {
        if g.len() != args.model.planes.channels() {
            return Err(Error::shape("curriculum weights", args.model.planes.channels(), g.len()));
        }
    }
    let chunks: Vec<(usize, usize)> = (0..samples.n_rays)
        .step_by(RAY_CHUNK)
        .map(|r0| (r0, (r0 + RAY_CHUNK).min(samples.n_rays)))
        .collect();
    chunks
        .par_iter()
        .map(|&(r0, r1)| run_chunk(args, r0, r1))
        .collect()
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Forward-only rendering of a sample batch.
pub fn render_batch<T: Real>(
    model: &FieldModel<T>,
    samples: &RaySampleBatch,
    gamma: Option<&[f64]>,
    background: [f64; 3],
) -> Result<Rendered<T>> {
    let gamma_t = gamma.map(to_t::<T>);
    let args = ChunkArgs {
        model,
        samples,
        gamma: gamma_t.as_deref(),
        background: background.map(T::of),
        targets: None,
        total_rays: samples.n_rays,
        want_grad: false,
    };
    let mut rendered = Rendered {
        rgb: Vec::with_capacity(3 * samples.n_rays),
        acc: Vec::with_capacity(samples.n_rays),
    };
    for chunk in run(&args)? {
        rendered.rgb.extend(chunk.rgb);
        rendered.acc.extend(chunk.acc);
    }
    Ok(rendered)
}

/// Rays rendered per batch when drawing whole images.
const IMAGE_RAY_BLOCK: usize = 4096;

/// A rendered view plus per-pixel accumulated opacity.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub image: Image,
    pub acc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RenderOptions<'a> {
    pub n_samples: usize,
    pub bbox: Aabb,
    pub background: [f64; 3],
    pub gamma: Option<&'a [f64]>,
}

/// Renders every pixel of `cam` with deterministic (bin-midpoint) samples.
pub fn render_image<T: Real>(
    model: &FieldModel<T>,
    cam: &Camera,
    time: Option<f64>,
    opts: &RenderOptions<'_>,
) -> Result<RenderedImage> {
    cam.validate()?;
    let rays = image_rays(cam)?;
    let mut rgb = Vec::with_capacity(3 * rays.len());
    let mut acc = Vec::with_capacity(rays.len());
    // Unused: deterministic sampling draws no random numbers.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for block in rays.chunks(IMAGE_RAY_BLOCK) {
        let times = time.map(|t| vec![t; block.len()]);
        let samples = RaySampleBatch::build(
            block.to_vec(),
            times,
            opts.n_samples,
            cam.near,
            cam.far,
            &opts.bbox,
            false,
            &mut rng,
        );
        let out = render_batch(model, &samples, opts.gamma, opts.background)?;
        rgb.extend(out.rgb.iter().map(|v| v.to_f64_lossy()));
        acc.extend(out.acc.iter().map(|v| v.to_f64_lossy()));
    }
    Ok(RenderedImage {
        image: Image::new(cam.width, cam.height, rgb)?,
        acc,
    })
}

/// A fixed batch with supervision: everything the loss depends on besides Θ.
#[derive(Clone, Debug)]
pub struct Supervision<'a> {
    pub samples: &'a RaySampleBatch,
    /// Target colors, three per ray.
    pub targets: &'a [f64],
    pub background: [f64; 3],
    /// Curriculum weights; `None` means every channel fully engaged.
    pub gamma: Option<&'a [f64]>,
    pub weights: LossWeights,
}

fn evaluate<T: Real>(
    model: &FieldModel<T>,
    sup: &Supervision<'_>,
    want_grad: bool,
) -> Result<(LossTerms, Option<GradStore<T>>)> {
    let gamma_t = sup.gamma.map(to_t::<T>);
    let args = ChunkArgs {
        model,
        samples: sup.samples,
        gamma: gamma_t.as_deref(),
        background: sup.background.map(T::of),
        targets: Some(sup.targets),
        total_rays: sup.samples.n_rays,
        want_grad,
    };
    let chunks = run(&args)?;
    let mut sq = T::zero();
    let mut grad: Option<GradStore<T>> = None;
    for chunk in chunks {
        sq += chunk.sq_err;
        if let Some(g) = chunk.grad {
            match grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad = Some(g),
            }
        }
    }
    let photometric = sq / T::from_usize(sup.samples.n_rays.max(1)).unwrap();
    let terms = loss_terms(photometric, &model.planes, &sup.weights);
    if !terms.total.is_finite() {
        return Err(Error::NonFinite { stage: "loss" });
    }
    if want_grad {
        let mut g = grad.unwrap_or_else(|| GradStore::zeros_for(model));
        regularizer_grad(&model.planes, &sup.weights, &mut g.planes);
        if !g.is_finite() {
            return Err(Error::NonFinite { stage: "gradients" });
        }
        grad = Some(g);
    }
    Ok((terms.to_f64(), grad))
}

/// Loss terms without gradients.
pub fn loss<T: Real>(model: &FieldModel<T>, sup: &Supervision<'_>) -> Result<LossTerms> {
    Ok(evaluate(model, sup, false)?.0)
}

/// Full objective and exact gradients for every parameter.
pub fn backward<T: Real>(model: &FieldModel<T>, sup: &Supervision<'_>) -> Result<(LossTerms, GradStore<T>)> {
    let (terms, grad) = evaluate(model, sup, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Largest central-difference step tried.
    pub step: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    /// Restrict the check to these groups; `None` checks everything.
    pub groups: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-4,
            floor: 1e-6,
            groups: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares [`backward`] against central finite differences.
pub fn check_gradients(
    model: &FieldModel<f64>,
    sup: &Supervision<'_>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    check_gradients_with(model, sup, opts, |m| Ok(backward(m, sup)?.1))
}

/// Like [`check_gradients`] with a caller-supplied analytic gradient.
///
/// Each entry's derivative is estimated at steps `h, h/10, ...`; the estimate
/// taken is the larger-step member of the best-agreeing consecutive pair, so an interval that
/// straddles a ReLU or |x| kink is refined away instead of reported.
pub fn check_gradients_with(
    model: &FieldModel<f64>,
    sup: &Supervision<'_>,
    opts: &GradCheckOptions,
    analytic: impl Fn(&FieldModel<f64>) -> Result<GradStore<f64>>,
) -> Result<GradCheckReport> {
    let grad = analytic(model)?;
    let analytic_groups: Vec<(String, Vec<f64>)> = grad
        .groups()
        .into_iter()
        .map(|(name, _, v)| (name, v.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut f = |m: &FieldModel<f64>| -> Result<f64> { Ok(loss(m, sup)?.total) };
    let mut groups = Vec::new();
    for (g, (name, an)) in analytic_groups.iter().enumerate() {
        if let Some(sel) = &opts.groups {
            if !sel.iter().any(|s| s == name) {
                continue;
            }
        }
        let mut worst = (0.0f64, 0usize);
        for e in 0..an.len() {
            let numeric = adaptive_central_difference(&mut probe, g, e, opts, &mut f)?;
            let denom = an[e].abs().max(numeric.abs()).max(opts.floor);
            let rel = (an[e] - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, e);
            }
        }
        groups.push(GroupReport {
            name: name.clone(),
            entries: an.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            passed: worst.0 < opts.tolerance,
        });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        groups,
        passed,
    })
}

fn set_param(model: &mut FieldModel<f64>, group: usize, entry: usize, value: f64) -> f64 {
    let mut groups = model.param_groups_mut();
    let slot = &mut groups[group].1[entry];
    std::mem::replace(slot, value)
}

fn adaptive_central_difference(
    model: &mut FieldModel<f64>,
    group: usize,
    entry: usize,
    opts: &GradCheckOptions,
    f: &mut impl FnMut(&FieldModel<f64>) -> Result<f64>,
) -> Result<f64> {
    let x = model.param_groups()[group].2[entry];
    let base = f(model)?.abs();
    let mut central = |model: &mut FieldModel<f64>, h: f64| -> Result<f64> {
        set_param(model, group, entry, x + h);
        let plus = f(model)?;
        set_param(model, group, entry, x - h);
        let minus = f(model)?;
        set_param(model, group, entry, x);
        Ok((plus - minus) / (2.0 * h))
    };
    // Differences below this are indistinguishable from rounding in `f`.
    let noise = |h: f64| 100.0 * f64::EPSILON * base.max(1.0) / h;
    let mut h = opts.step;
    let mut prev = central(model, h)?;
    let mut best = (f64::INFINITY, prev);
    for _ in 0..3 {
        h /= 10.0;
        let next = central(model, h)?;
        let allowed = (0.1 * opts.tolerance * next.abs().max(prev.abs())).max(noise(h)).max(f64::MIN_POSITIVE);
        let gap = (next - prev).abs() / allowed;
        if gap < best.0 {
            best = (gap, prev);
        }
        if gap <= 1.0 {
            break;
        }
        prev = next;
    }
    Ok(best.1)
}
