//! Gaussian smoothing operator `K` and the momentum representation `v = K*w`.
//!
//! The discrete kernel is a truncated (3 sigma) Gaussian with weights
//! normalized to one, applied separably. Boundaries use half-sample mirror
//! extension, which keeps the discrete operator symmetric
//! (`<K a, b> = <a, K b>`) while still reproducing constants exactly.

use crate::error::{GdrError, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
}

impl GaussianKernel {
    /// Isotropic kernel with standard deviation `sigma` in millimetres.
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GdrError::InvalidParameter(format!("kernel sigma {sigma} must be positive")));
        }
        Ok(GaussianKernel { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Truncation radius in whole voxels for the given spacing.
    pub fn radius(&self, spacing: f64) -> usize {
        (3.0 * self.sigma / spacing).ceil() as usize
    }

    /// Normalized 1D weights, length `2 * radius + 1`.
    pub fn weights(&self, spacing: f64) -> Vec<f64> {
        gaussian_weights(self.sigma / spacing)
    }
}

fn gaussian_weights(sigma_vox: f64) -> Vec<f64> {
    let r = (3.0 * sigma_vox).ceil() as i64;
    let mut w: Vec<f64> = (-r..=r).map(|j| (-(j as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Half-sample symmetric index folding with period `2n`.
#[inline]
fn fold(j: i64, n: usize) -> usize {
    let n = n as i64;
    let m = j.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn convolve_axis(geom: &GridGeometry, data: &[f64], axis: usize, weights: &[f64]) -> Vec<f64> {
    let n = geom.dims()[axis];
    let stride = geom.stride(axis);
    let r = (weights.len() / 2) as i64;
    let taps = weights.len();
    // offsets[i * taps + t]: folded source position minus i, for output position i
    let offsets: Vec<i64> =
        (0..n).flat_map(|i| (0..taps).map(move |t| fold(i as i64 + t as i64 - r, n) as i64 - i as i64)).collect();
    par::collect(geom.len(), |l| {
        let i = (l / stride) % n;
        let offs = &offsets[i * taps..(i + 1) * taps];
        let mut acc = 0.0;
        for (w, &o) in weights.iter().zip(offs) {
            acc += w * data[(l as i64 + o * stride as i64) as usize];
        }
        acc
    })
}

/// Separable Gaussian smoothing with per-axis sigma given in voxels.
pub(crate) fn smooth_values_voxels(geom: &GridGeometry, data: &[f64], sigma_vox: &[f64]) -> Vec<f64> {
    let mut cur = data.to_vec();
    for (axis, &s) in sigma_vox.iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        cur = convolve_axis(geom, &cur, axis, &gaussian_weights(s));
    }
    cur
}

pub(crate) fn smooth_values(geom: &GridGeometry, data: &[f64], k: &GaussianKernel) -> Vec<f64> {
    let sig: Vec<f64> = geom.spacing().iter().map(|h| k.sigma / h).collect();
    smooth_values_voxels(geom, data, &sig)
}

pub fn smooth_scalar(g: &ScalarGrid, k: &GaussianKernel) -> ScalarGrid {
    ScalarGrid::from_vec_unchecked(*g.geometry(), smooth_values(g.geometry(), g.values(), k))
}

pub fn smooth_vector(v: &VectorGrid, k: &GaussianKernel) -> VectorGrid {
    let comps = v.components().iter().map(|c| smooth_values(v.geometry(), c, k)).collect();
    VectorGrid::from_components_unchecked(*v.geometry(), comps)
}

/// `sum_voxels sum_components a . b` times the voxel volume.
pub fn l2_inner_product(a: &VectorGrid, b: &VectorGrid) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    Ok(l2_unchecked(a, b))
}

pub(crate) fn l2_unchecked(a: &VectorGrid, b: &VectorGrid) -> f64 {
    let mut total = 0.0;
    for k in 0..a.ndim() {
        let (x, y) = (a.component(k), b.component(k));
        total += par::sum(x.len(), |l| x[l] * y[l]);
    }
    total * a.geometry().voxel_volume()
}

/// Momenta `w_t`, one vector field per computational time point. The
/// velocities are always `v_t = K * w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumField {
    pub w: Vec<VectorGrid>,
}

impl MomentumField {
    pub fn zeros(geom: GridGeometry, points: usize) -> Self {
        MomentumField { w: vec![VectorGrid::zeros(geom); points] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn velocities(&self, k: &GaussianKernel) -> Vec<VectorGrid> {
        self.w.iter().map(|w| smooth_vector(w, k)).collect()
    }

    /// Largest deviation `|K*w_t - v_t|` over all time points.
    pub fn consistency_error(&self, v: &[VectorGrid], k: &GaussianKernel) -> f64 {
        self.w.iter().zip(v).map(|(w, v)| smooth_vector(w, k).max_abs_diff(v)).fold(0.0, f64::max)
    }

    pub fn check_consistent(&self, v: &[VectorGrid], k: &GaussianKernel, tol: f64) -> Result<()> {
        if v.len() != self.w.len() {
            return Err(GdrError::InvalidParameter(format!(
                "{} velocity fields for {} momenta",
                v.len(),
                self.w.len()
            )));
        }
        let max_dev = self.consistency_error(v, k);
        if max_dev > tol {
            return Err(GdrError::MomentumMismatch { max_dev });
        }
        Ok(())
    }
}

/// Tolerance on `|K*w - v|` for [`metric_energy`].
pub const MOMENTUM_TOLERANCE: f64 = 1e-10;

/// `1/2 sum_t weight_t <w_t, v_t>`, which equals the kinetic energy
/// `1/2 int <v, v>_g dt` when `v = K*w`.
pub fn metric_energy(w: &MomentumField, v: &[VectorGrid], k: &GaussianKernel, weights: &[f64]) -> Result<f64> {
    w.check_consistent(v, k, MOMENTUM_TOLERANCE)?;
    if weights.len() != v.len() {
        return Err(GdrError::InvalidParameter("one time weight per momentum field required".into()));
    }
    Ok(metric_energy_unchecked(&w.w, v, weights))
}

pub(crate) fn metric_energy_unchecked(w: &[VectorGrid], v: &[VectorGrid], weights: &[f64]) -> f64 {
    0.5 * w.iter().zip(v).zip(weights).map(|((w, v), dt)| dt * l2_unchecked(w, v)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn geom2(n0: usize, n1: usize, h: f64) -> GridGeometry {
        GridGeometry::isotropic(&[n0, n1], h).unwrap()
    }

    /// Dense 2D convolution with the same mirrored boundary, used as an oracle.
    fn dense_smooth(g: &ScalarGrid, k: &GaussianKernel) -> Vec<f64> {
        let geom = g.geometry();
        let (n0, n1) = (geom.dims()[0], geom.dims()[1]);
        let w0 = k.weights(geom.spacing()[0]);
        let w1 = k.weights(geom.spacing()[1]);
        let (r0, r1) = ((w0.len() / 2) as i64, (w1.len() / 2) as i64);
        let mut out = vec![0.0; geom.len()];
        for j in 0..n1 {
            for i in 0..n0 {
                let mut acc = 0.0;
                for (a, wa) in w0.iter().enumerate() {
                    for (b, wb) in w1.iter().enumerate() {
                        let si = fold(i as i64 + a as i64 - r0, n0);
                        let sj = fold(j as i64 + b as i64 - r1, n1);
                        acc += wa * wb * g.values()[si + n0 * sj];
                    }
                }
                out[i + n0 * j] = acc;
            }
        }
        out
    }

    #[test]
    fn weights_are_normalized_and_truncated() {
        let k = GaussianKernel::new(6.0).unwrap();
        let w = k.weights(2.0);
        assert_eq!(w.len(), 2 * 9 + 1);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(GaussianKernel::new(0.0).is_err());
    }

    #[test]
    fn constant_is_preserved() {
        let g = geom2(11, 7, 1.5);
        let k = GaussianKernel::new(4.0).unwrap();
        let s = smooth_scalar(&ScalarGrid::filled(g, 2.75), &k);
        assert!(s.values().iter().all(|&x| (x - 2.75).abs() <= 1e-12));
        let v = smooth_vector(&VectorGrid::constant(g, &[1.0, -3.0]), &k);
        assert!(v.max_abs_diff(&VectorGrid::constant(g, &[1.0, -3.0])) <= 1e-12);
    }

    #[test]
    fn impulse_matches_dense_oracle() {
        let g = geom2(31, 29, 1.0);
        let k = GaussianKernel::new(2.5).unwrap();
        let mut imp = ScalarGrid::zeros(g);
        let centre = g.linear_index(&[15, 14]);
        imp.values_mut()[centre] = 1.0;
        let sep = smooth_scalar(&imp, &k);
        let dense = dense_smooth(&imp, &k);
        for (a, b) in sep.values().iter().zip(&dense) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let w = k.weights(1.0);
        let c = w[w.len() / 2];
        assert_abs_diff_eq!(sep.values()[centre], c * c, epsilon = 1e-15);
    }

    #[test]
    fn random_field_matches_dense_oracle() {
        let g = geom2(32, 32, 2.0);
        let k = GaussianKernel::new(5.0).unwrap();
        let f = ScalarGrid::from_fn(g, |p| (0.37 * p[0]).sin() * (0.11 * p[1] + 0.3).cos() + 0.01 * p[0]);
        let sep = smooth_scalar(&f, &k);
        let dense = dense_smooth(&f, &k);
        for (a, b) in sep.values().iter().zip(&dense) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn linear_ramp_unchanged_away_from_boundary() {
        let g = geom2(40, 20, 1.0);
        let k = GaussianKernel::new(2.0).unwrap();
        let r = k.radius(1.0);
        let f = ScalarGrid::from_fn(g, |p| 0.5 * p[0] - 1.25 * p[1] + 3.0);
        let s = smooth_scalar(&f, &k);
        for l in 0..g.len() {
            if g.is_interior(l, r) {
                assert_abs_diff_eq!(s.values()[l], f.values()[l], epsilon = 1e-10);
            }
        }
        let v = VectorGrid::from_fn(g, |p| vec![p[0], -p[1]]);
        let sv = smooth_vector(&v, &k);
        for l in 0..g.len() {
            if g.is_interior(l, r) {
                assert_abs_diff_eq!(sv.component(0)[l], v.component(0)[l], epsilon = 1e-10);
                assert_abs_diff_eq!(sv.component(1)[l], v.component(1)[l], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn smoothing_commutes_with_transpose() {
        let (n0, n1) = (13, 9);
        let g = geom2(n0, n1, 1.0);
        let gt = geom2(n1, n0, 1.0);
        let k = GaussianKernel::new(1.7).unwrap();
        let f = ScalarGrid::from_fn(g, |p| (p[0] * 0.7).sin() + p[1] * p[1] * 0.1);
        let transpose = |src: &ScalarGrid, a: usize, b: usize| {
            let mut out = vec![0.0; a * b];
            for j in 0..b {
                for i in 0..a {
                    out[j + b * i] = src.values()[i + a * j];
                }
            }
            out
        };
        let ft = ScalarGrid::new(gt, transpose(&f, n0, n1)).unwrap();
        let a = transpose(&smooth_scalar(&f, &k), n0, n1);
        let b = smooth_scalar(&ft, &k);
        for (x, y) in a.iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn smoothing_is_self_adjoint() {
        let g = geom2(17, 12, 1.0);
        let k = GaussianKernel::new(3.0).unwrap();
        let a = VectorGrid::from_fn(g, |p| vec![(p[0] * 0.9).sin(), p[1].cos() * p[0]]);
        let b = VectorGrid::from_fn(g, |p| vec![p[1] * 0.3 - 1.0, (p[0] * p[1] * 0.05).sin()]);
        let lhs = l2_inner_product(&smooth_vector(&a, &k), &b).unwrap();
        let rhs = l2_inner_product(&a, &smooth_vector(&b, &k)).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn inner_product_examples() {
        let g = geom2(2, 2, 1.0);
        let ones = VectorGrid::constant(g, &[1.0, 1.0]);
        assert_eq!(l2_inner_product(&ones, &ones).unwrap(), 8.0);
        assert_eq!(l2_inner_product(&ones, &VectorGrid::zeros(g)).unwrap(), 0.0);
        let g3 = geom2(3, 2, 1.0);
        assert!(l2_inner_product(&ones, &VectorGrid::zeros(g3)).is_err());
    }

    #[test]
    fn metric_energy_examples() {
        let g = geom2(21, 21, 1.0);
        let k = GaussianKernel::new(2.0).unwrap();
        let zero = MomentumField::zeros(g, 3);
        assert_eq!(metric_energy(&zero, &zero.velocities(&k), &k, &[0.5, 0.5, 0.5]).unwrap(), 0.0);

        let mut w = MomentumField::zeros(g, 1);
        w.w[0].component_mut(0)[g.linear_index(&[10, 10])] = 1.0;
        let v = w.velocities(&k);
        let dt = 0.25;
        let e = metric_energy(&w, &v, &k, &[dt]).unwrap();
        let imp = w.w[0].component_grid(0);
        let dense = dense_smooth(&imp, &k);
        let expected = 0.5 * dt * dense[g.linear_index(&[10, 10])];
        assert_abs_diff_eq!(e, expected, epsilon = 1e-14);

        let mut w3 = w.clone();
        w3.w[0].scale(3.0);
        let e3 = metric_energy(&w3, &w3.velocities(&k), &k, &[dt]).unwrap();
        assert_abs_diff_eq!(e3, 9.0 * e, epsilon = 1e-14);

        let mut bad = v.clone();
        bad[0].component_mut(1)[0] += 1e-6;
        assert!(matches!(metric_energy(&w, &bad, &k, &[dt]), Err(GdrError::MomentumMismatch { .. })));
    }
}
