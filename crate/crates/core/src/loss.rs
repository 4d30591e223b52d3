//! Photometric error and grid regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PlaneSet, SceneMode};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Laplacian smoothing weight.
    pub lambda1: f64,
    /// Extra emphasis on temporal-plane smoothing (dynamic scenes only).
    pub lambda2: f64,
    /// L1 sparsity weight.
    pub lambda3: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Individual loss terms, unweighted, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub laplacian: f64,
    pub l1: f64,
    pub total: f64,
}

/// Mean over rays of the squared RGB error (three values per ray).
pub fn photometric<T: Real>(rendered: &[T], truth: &[T]) -> Result<T> {
    if rendered.len() != truth.len() || !rendered.len().is_multiple_of(3) {
        return Err(Error::shape("photometric batch", truth.len(), rendered.len()));
    }
    let rays = rendered.len() / 3;
    if rays == 0 {
        return Ok(T::zero());
    }
    let sum: T = rendered
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / T::from_usize(rays).unwrap())
}

/// Gradient of [`photometric`] with respect to `rendered`.
pub fn photometric_grad<T: Real>(rendered: &[T], truth: &[T]) -> Vec<T> {
    let rays = (rendered.len() / 3).max(1);
    let scale = T::of(2.0) / T::from_usize(rays).unwrap();
    rendered.iter().zip(truth).map(|(&a, &b)| scale * (a - b)).collect()
}

/// Sum of squared forward differences along rows and columns, per channel.
/// A single-row grid only contributes column differences.
pub fn laplacian<T: Real>(grid: &FeatureGrid<T>) -> T {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut total = T::zero();
    for c in 0..grid.channels() {
        let p = grid.channel(c);
        for h in 0..rows {
            for w in 0..cols {
                let v = p[h * cols + w];
                if h + 1 < rows {
                    let d = p[(h + 1) * cols + w] - v;
                    total += d * d;
                }
                if w + 1 < cols {
                    let d = p[h * cols + w + 1] - v;
                    total += d * d;
                }
            }
        }
    }
    total
}

/// Adds `scale * ∂laplacian/∂P` into `grad`.
pub fn laplacian_grad<T: Real>(grid: &FeatureGrid<T>, scale: T, grad: &mut FeatureGrid<T>) {
    let (rows, cols) = (grid.rows(), grid.cols());
    let n = grid.channel_len();
    let two = T::of(2.0) * scale;
    for c in 0..grid.channels() {
        let p = grid.channel(c);
        let g = &mut grad.data_mut()[c * n..(c + 1) * n];
        for h in 0..rows {
            for w in 0..cols {
                let i = h * cols + w;
                if h + 1 < rows {
                    let d = two * (p[i + cols] - p[i]);
                    g[i + cols] += d;
                    g[i] -= d;
                }
                if w + 1 < cols {
                    let d = two * (p[i + 1] - p[i]);
                    g[i + 1] += d;
                    g[i] -= d;
                }
            }
        }
    }
}

/// `(‖M‖₁, ‖V‖₁)`.
pub fn l1_norm<T: Real>(ps: &PlaneSet<T>) -> (T, T) {
    let norm = |grids: &[FeatureGrid<T>; 3]| -> T {
        grids.iter().flat_map(|g| g.data().iter()).map(|v| v.abs()).sum()
    };
    (norm(ps.planes()), norm(ps.factors()))
}

/// `Σ_i (L(M_i) + λ2 L(V_i))`; the factor term is dropped for static scenes.
pub fn smoothness<T: Real>(ps: &PlaneSet<T>, lambda2: f64) -> T {
    let mut total: T = ps.planes().iter().map(laplacian).sum();
    if ps.mode() == SceneMode::Dynamic4D {
        let temporal: T = ps.factors().iter().map(laplacian).sum();
        total += T::of(lambda2) * temporal;
    }
    total
}

/// Full objective given a precomputed photometric term.
pub fn total_loss<T: Real>(photometric: T, ps: &PlaneSet<T>, w: &LossWeights) -> T {
    loss_terms(photometric, ps, w).total
}

/// Every term of the objective.
pub fn loss_terms<T: Real>(photometric: T, ps: &PlaneSet<T>, w: &LossWeights) -> TypedTerms<T> {
    let smooth = if w.lambda1 != 0.0 { smoothness(ps, w.lambda2) } else { T::zero() };
    let l1 = if w.lambda3 != 0.0 {
        let (m, v) = l1_norm(ps);
        m + v
    } else {
        T::zero()
    };
    TypedTerms {
        photometric,
        smoothness: smooth,
        l1,
        total: photometric + T::of(w.lambda1) * smooth + T::of(w.lambda3) * l1,
    }
}

/// [`LossTerms`] in the working precision.
#[derive(Clone, Copy, Debug)]
pub struct TypedTerms<T> {
    pub photometric: T,
    pub smoothness: T,
    pub l1: T,
    pub total: T,
}

impl<T: Real> TypedTerms<T> {
    pub fn to_f64(self) -> LossTerms {
        LossTerms {
            photometric: self.photometric.to_f64_lossy(),
            laplacian: self.smoothness.to_f64_lossy(),
            l1: self.l1.to_f64_lossy(),
            total: self.total.to_f64_lossy(),
        }
    }
}

/// Adds the gradient of the regularizers (λ1 smoothing, λ3 L1) into `grad`.
pub fn regularizer_grad<T: Real>(ps: &PlaneSet<T>, w: &LossWeights, grad: &mut PlaneSet<T>) {
    let l1 = T::of(w.lambda1);
    if w.lambda1 != 0.0 {
        for (p, g) in ps.planes().iter().zip(grad.planes_mut().iter_mut()) {
            laplacian_grad(p, l1, g);
        }
        if ps.mode() == SceneMode::Dynamic4D {
            let scale = l1 * T::of(w.lambda2);
            for (p, g) in ps.factors().iter().zip(grad.factors_mut().iter_mut()) {
                laplacian_grad(p, scale, g);
            }
        }
    }
    if w.lambda3 != 0.0 {
        let l3 = T::of(w.lambda3);
        for (p, g) in ps.grids().zip(grad.grids_mut()) {
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                let sign = if pv > T::zero() {
                    T::one()
                } else if pv < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                *gv += l3 * sign;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_laplacian(g: &FeatureGrid<f64>) -> f64 {
        let mut total = 0.0;
        for c in 0..g.channels() {
            for h in 0..g.rows() {
                for w in 0..g.cols() {
                    if h + 1 < g.rows() {
                        total += (g.get(c, h + 1, w) - g.get(c, h, w)).powi(2);
                    }
                    if w + 1 < g.cols() {
                        total += (g.get(c, h, w + 1) - g.get(c, h, w)).powi(2);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn photometric_cases() {
        let a = [0.2, 0.4, 0.6, 0.1, 0.1, 0.1];
        assert_eq!(photometric(&a, &a).unwrap(), 0.0);
        assert_eq!(photometric(&[1.0; 3], &[0.0; 3]).unwrap(), 3.0);
        assert!(photometric(&[1.0; 3], &[0.0; 6]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let mut want = 0.0;
        for ray in 0..10 {
            for ch in 0..3 {
                want += (r[3 * ray + ch] - t[3 * ray + ch]).powi(2);
            }
        }
        assert!((photometric(&r, &t).unwrap() - want / 10.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_hand_case() {
        let g = FeatureGrid::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(laplacian(&g), 10.0);
        let c = FeatureGrid::filled(3, 4, 4, 0.7);
        assert_eq!(laplacian(&c), 0.0);
    }

    #[test]
    fn laplacian_row_vector_uses_columns_only() {
        let g = FeatureGrid::from_vec(1, 1, 3, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(laplacian(&g), 5.0);
    }

    #[test]
    fn laplacian_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = FeatureGrid::<f64>::random(3, 4, 4, 1.0, &mut rng);
        assert!((laplacian(&g) - naive_laplacian(&g)).abs() < 1e-12);
    }

    #[test]
    fn laplacian_gradient_hand_case() {
        let g = FeatureGrid::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let mut grad = g.zeros_like();
        laplacian_grad(&g, 1.0, &mut grad);
        assert_eq!(grad.get(0, 0, 0), -6.0);
    }

    #[test]
    fn laplacian_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = FeatureGrid::<f64>::random(2, 3, 5, 1.0, &mut rng);
        let mut grad = g.zeros_like();
        laplacian_grad(&g, 1.0, &mut grad);
        let h = 1e-6;
        for e in 0..g.data().len() {
            let (mut p, mut m) = (g.clone(), g.clone());
            p.data_mut()[e] += h;
            m.data_mut()[e] -= h;
            let fd = (laplacian(&p) - laplacian(&m)) / (2.0 * h);
            let an = grad.data()[e];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0));
        }
    }

    #[test]
    fn l1_cases() {
        let mut ps = PlaneSet::<f64>::zeros(SceneMode::Static3D, 1, 2, 1).unwrap();
        assert_eq!(l1_norm(&ps), (0.0, 0.0));
        ps.planes_mut()[0]
            .data_mut()
            .copy_from_slice(&[-1.0, 2.0, 0.0, -3.0]);
        assert_eq!(l1_norm(&ps), (6.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = PlaneSet::<f64>::random(SceneMode::Dynamic4D, 2, 3, 3, 1.0, &mut rng).unwrap();
        let mut m = 0.0;
        let mut v = 0.0;
        for g in ps.planes() {
            for x in g.data() {
                m += x.abs();
            }
        }
        for g in ps.factors() {
            for x in g.data() {
                v += x.abs();
            }
        }
        let (lm, lv) = l1_norm(&ps);
        assert!((lm - m).abs() < 1e-12 && (lv - v).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = PlaneSet::<f64>::random(SceneMode::Dynamic4D, 2, 4, 3, 1.0, &mut rng).unwrap();
        let zero = LossWeights { lambda1: 0.0, lambda2: 2.5, lambda3: 0.0 };
        assert_eq!(total_loss(0.37, &ps, &zero), 0.37);
        let zeros = ps.zeros_like();
        let w = LossWeights { lambda1: 0.3, lambda2: 2.5, lambda3: 0.1 };
        assert_eq!(total_loss(0.37, &zeros, &w), 0.37);

        let w = LossWeights { lambda1: 0.01, lambda2: 2.5, lambda3: 1e-5 };
        let mut want = 0.37;
        for i in 0..3 {
            want += 0.01 * (naive_laplacian(&ps.planes()[i]) + 2.5 * naive_laplacian(&ps.factors()[i]));
        }
        let (m, v) = l1_norm(&ps);
        want += 1e-5 * (m + v);
        assert!((total_loss(0.37, &ps, &w) - want).abs() < 1e-12);
    }

    #[test]
    fn static_mode_skips_factor_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps = PlaneSet::<f64>::random(SceneMode::Static3D, 2, 4, 1, 1.0, &mut rng).unwrap();
        let want: f64 = ps.planes().iter().map(naive_laplacian).sum();
        assert!((smoothness(&ps, 7.0) - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_monotone_in_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = PlaneSet::<f64>::random(SceneMode::Dynamic4D, 2, 4, 3, 1.0, &mut rng).unwrap();
        let base = LossWeights { lambda1: 0.1, lambda2: 1.0, lambda3: 0.1 };
        let l0 = total_loss(0.5, &ps, &base);
        for bumped in [
            LossWeights { lambda1: 0.2, ..base },
            LossWeights { lambda2: 2.0, ..base },
            LossWeights { lambda3: 0.2, ..base },
        ] {
            assert!(total_loss(0.5, &ps, &bumped) >= l0);
        }
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0, lambda3: 0.0 }.validate().is_err());
    }
}
