//! Regular grids carrying scalar and vector fields.
//!
//! Memory layout is fixed: the first axis varies fastest, so the linear index
//! of voxel `(i0, i1, i2)` is `i0 + n0 * (i1 + n1 * i2)`. Vector fields are
//! stored component-major (all of component 0, then component 1, ...).
//!
//! Maps are always represented as displacements from the identity,
//! `phi(x) = x + u(x)`. Interpolation is multilinear with clamp-to-edge
//! boundaries; finite differences are central in the interior and one-sided
//! on boundary voxels.

use crate::error::{GdrError, Result};
use crate::kernel;
use crate::par;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    ndim: usize,
    dims: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
    origin: [f64; MAX_DIM],
}

impl GridGeometry {
    pub fn new(dims: &[usize], spacing: &[f64], origin: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if ndim == 0 || ndim > MAX_DIM {
            return Err(GdrError::InvalidGeometry(format!("{ndim} axes (1 to {MAX_DIM} supported)")));
        }
        if spacing.len() != ndim || origin.len() != ndim {
            return Err(GdrError::InvalidGeometry(format!(
                "axis count mismatch: dims {ndim}, spacing {}, origin {}",
                spacing.len(),
                origin.len()
            )));
        }
        let mut g = GridGeometry { ndim, dims: [1; MAX_DIM], spacing: [1.0; MAX_DIM], origin: [0.0; MAX_DIM] };
        for k in 0..ndim {
            if dims[k] < 2 {
                return Err(GdrError::InvalidGeometry(format!("axis {k} has {} voxels (need >= 2)", dims[k])));
            }
            if !(spacing[k] > 0.0 && spacing[k].is_finite()) {
                return Err(GdrError::InvalidGeometry(format!("axis {k} spacing {} must be positive", spacing[k])));
            }
            if !origin[k].is_finite() {
                return Err(GdrError::InvalidGeometry(format!("axis {k} origin is not finite")));
            }
            g.dims[k] = dims[k];
            g.spacing[k] = spacing[k];
            g.origin[k] = origin[k];
        }
        Ok(g)
    }

    /// Isotropic grid with origin at zero.
    pub fn isotropic(dims: &[usize], spacing: f64) -> Result<Self> {
        Self::new(dims, &vec![spacing; dims.len()], &vec![0.0; dims.len()])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.ndim]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Physical length of the grid along `axis` (first to last voxel center).
    pub fn extent(&self, axis: usize) -> f64 {
        (self.dims[axis] - 1) as f64 * self.spacing[axis]
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.dims[..axis].iter().product()
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut l = 0;
        for k in (0..self.ndim).rev() {
            l = l * self.dims[k] + idx[k];
        }
        l
    }

    pub fn voxel_index(&self, linear: usize) -> [usize; MAX_DIM] {
        let mut rem = linear;
        let mut out = [0; MAX_DIM];
        for k in 0..self.ndim {
            out[k] = rem % self.dims[k];
            rem /= self.dims[k];
        }
        out
    }

    pub fn position(&self, linear: usize) -> [f64; MAX_DIM] {
        let idx = self.voxel_index(linear);
        let mut p = [0.0; MAX_DIM];
        for k in 0..self.ndim {
            p[k] = self.origin[k] + idx[k] as f64 * self.spacing[k];
        }
        p
    }

    /// Continuous index coordinates of a physical point.
    pub fn to_index_coords(&self, p: &[f64]) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        for k in 0..self.ndim {
            c[k] = (p[k] - self.origin[k]) / self.spacing[k];
        }
        c
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (0..self.ndim).all(|k| p[k] >= self.origin[k] && p[k] <= self.origin[k] + self.extent(k))
    }

    /// True if voxel `linear` is at least `margin` voxels from every face.
    pub fn is_interior(&self, linear: usize, margin: usize) -> bool {
        let idx = self.voxel_index(linear);
        (0..self.ndim).all(|k| idx[k] >= margin && idx[k] + margin < self.dims[k])
    }

    pub fn ensure_same(&self, other: &GridGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(GdrError::GeometryMismatch(format!(
                "dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims(),
                self.spacing(),
                other.dims(),
                other.spacing()
            )))
        }
    }

    /// Geometry obtained by keeping every `factor`-th voxel.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(GdrError::InvalidParameter("downsample factor must be >= 1".into()));
        }
        let dims: Vec<usize> = self.dims().iter().map(|&n| (n - 1) / factor + 1).collect();
        let spacing: Vec<f64> = self.spacing().iter().map(|&h| h * factor as f64).collect();
        GridGeometry::new(&dims, &spacing, self.origin())
    }
}

/// Corner indices and weights of a multilinear interpolation stencil.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub n: usize,
}

impl Stencil {
    /// Stencil at continuous index coordinates `c`, clamped to the grid.
    #[inline]
    pub fn at(g: &GridGeometry, c: &[f64; MAX_DIM]) -> Stencil {
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for k in 0..g.ndim {
            let n = g.dims[k];
            let x = c[k].clamp(0.0, (n - 1) as f64);
            let i = (x.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = x - i as f64;
        }
        let mut s = Stencil { idx: [0; 8], w: [0.0; 8], n: 1 << g.ndim };
        let s1 = g.dims[0];
        let s2 = g.dims[0] * g.dims[1];
        let l0 = base[0] + s1 * base[1] + s2 * base[2];
        for corner in 0..s.n {
            let mut l = l0;
            let mut w = 1.0;
            for k in 0..g.ndim {
                let bit = (corner >> k) & 1;
                let stride = match k {
                    0 => 1,
                    1 => s1,
                    _ => s2,
                };
                if bit == 1 {
                    l += stride;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            s.idx[corner] = l;
            s.w[corner] = w;
        }
        s
    }

    /// Stencil at the position `x + u` where `x` is voxel `linear` and `u` a
    /// physical displacement.
    #[inline]
    pub fn displaced(g: &GridGeometry, linear: usize, u: &[f64; MAX_DIM]) -> Stencil {
        let idx = g.voxel_index(linear);
        let mut c = [0.0; MAX_DIM];
        for k in 0..g.ndim {
            c[k] = idx[k] as f64 + u[k] / g.spacing[k];
        }
        Stencil::at(g, &c)
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n {
            acc += self.w[j] * data[self.idx[j]];
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    geom: GridGeometry,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(geom: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(GdrError::InvalidGeometry(format!(
                "{} values for a grid of {} voxels",
                data.len(),
                geom.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GdrError::NonFinite { index });
        }
        Ok(ScalarGrid { geom, data })
    }

    pub(crate) fn from_vec_unchecked(geom: GridGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geom.len());
        ScalarGrid { geom, data }
    }

    pub fn filled(geom: GridGeometry, value: f64) -> Self {
        ScalarGrid { geom, data: vec![value; geom.len()] }
    }

    pub fn zeros(geom: GridGeometry) -> Self {
        Self::filled(geom, 0.0)
    }

    /// Evaluates `f` at every voxel's physical position.
    pub fn from_fn(geom: GridGeometry, f: impl Fn(&[f64]) -> f64 + Sync) -> Self {
        let data = par::collect(geom.len(), |l| {
            let p = geom.position(l);
            f(&p[..geom.ndim])
        });
        ScalarGrid { geom, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> ScalarGrid {
        let data = par::collect(self.len(), |l| f(self.data[l]));
        ScalarGrid { geom: self.geom, data }
    }

    pub fn zip_map(&self, other: &ScalarGrid, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<ScalarGrid> {
        self.geom.ensure_same(&other.geom)?;
        let data = par::collect(self.len(), |l| f(self.data[l], other.data[l]));
        Ok(ScalarGrid { geom: self.geom, data })
    }

    pub fn sum(&self) -> f64 {
        par::sum(self.len(), |l| self.data[l])
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Integral over the domain (sum times voxel volume).
    pub fn integral(&self) -> f64 {
        self.sum() * self.geom.voxel_volume()
    }

    pub fn sample(&self, p: &[f64]) -> f64 {
        sample_scalar(self, p)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GdrError::NonFinite { index }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    geom: GridGeometry,
    comps: Vec<Vec<f64>>,
}

impl VectorGrid {
    pub fn new(geom: GridGeometry, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != geom.ndim() {
            return Err(GdrError::InvalidGeometry(format!(
                "{} components for a {}-axis grid",
                comps.len(),
                geom.ndim()
            )));
        }
        for c in &comps {
            if c.len() != geom.len() {
                return Err(GdrError::InvalidGeometry(format!(
                    "component of {} values for a grid of {} voxels",
                    c.len(),
                    geom.len()
                )));
            }
            if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                return Err(GdrError::NonFinite { index });
            }
        }
        Ok(VectorGrid { geom, comps })
    }

    pub(crate) fn from_components_unchecked(geom: GridGeometry, comps: Vec<Vec<f64>>) -> Self {
        VectorGrid { geom, comps }
    }

    pub fn zeros(geom: GridGeometry) -> Self {
        VectorGrid { geom, comps: vec![vec![0.0; geom.len()]; geom.ndim()] }
    }

    pub fn constant(geom: GridGeometry, value: &[f64]) -> Self {
        VectorGrid { geom, comps: (0..geom.ndim()).map(|k| vec![value[k]; geom.len()]).collect() }
    }

    /// Evaluates `f` (returning one value per axis) at every voxel position.
    pub fn from_fn(geom: GridGeometry, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Self {
        let comps = (0..geom.ndim())
            .map(|k| {
                par::collect(geom.len(), |l| {
                    let p = geom.position(l);
                    f(&p[..geom.ndim])[k]
                })
            })
            .collect();
        VectorGrid { geom, comps }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn ndim(&self) -> usize {
        self.geom.ndim()
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.comps[k]
    }

    pub fn component_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.comps[k]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.comps
    }

    pub fn component_grid(&self, k: usize) -> ScalarGrid {
        ScalarGrid { geom: self.geom, data: self.comps[k].clone() }
    }

    #[inline]
    pub fn at(&self, linear: usize) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (k, c) in self.comps.iter().enumerate() {
            out[k] = c[linear];
        }
        out
    }

    #[inline]
    pub fn apply_stencil(&self, s: &Stencil) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (k, c) in self.comps.iter().enumerate() {
            out[k] = s.apply(c);
        }
        out
    }

    pub fn sample(&self, p: &[f64]) -> [f64; MAX_DIM] {
        sample_vector(self, p)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &VectorGrid) -> Result<()> {
        self.geom.ensure_same(&other.geom)?;
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            for x in c.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> VectorGrid {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// Largest Euclidean vector norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        par::max(self.geom.len(), |l| {
            let v = self.at(l);
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
    }

    pub fn max_abs_diff(&self, other: &VectorGrid) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|&x| x == 0.0))
    }
}

/// Paired or unpaired set of physical points (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Vec<f64>>,
    pub paired: bool,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vec<f64>>, paired: bool) -> Self {
        LandmarkSet { points, paired }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != geom.ndim() {
                return Err(GdrError::InvalidParameter(format!("landmark {i} has {} coordinates", p.len())));
            }
            if !geom.contains(p) {
                return Err(GdrError::InvalidParameter(format!("landmark {i} at {p:?} lies outside the grid")));
            }
        }
        Ok(())
    }

    pub fn check_paired_with(&self, other: &LandmarkSet) -> Result<()> {
        if !(self.paired && other.paired) || self.len() != other.len() {
            return Err(GdrError::InvalidParameter(format!(
                "landmark sets are not paired ({} vs {} points)",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Continuous index coordinates of `x + u` for voxel `linear`.
#[inline]
pub(crate) fn displaced_coords(g: &GridGeometry, linear: usize, u: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
    let idx = g.voxel_index(linear);
    let mut c = [0.0; MAX_DIM];
    for k in 0..g.ndim {
        c[k] = idx[k] as f64 + u[k] / g.spacing[k];
    }
    c
}

/// Physical gradient of the multilinear interpolant of `data` at index
/// coordinates `c`. At a cell boundary the two one-sided slopes are averaged;
/// outside the grid the clamped interpolant is flat.
pub(crate) fn interp_gradient(g: &GridGeometry, c: &[f64; MAX_DIM], data: &[f64]) -> [f64; MAX_DIM] {
    let mut out = [0.0; MAX_DIM];
    for a in 0..g.ndim {
        let top = (g.dims[a] - 1) as f64;
        let x = c[a];
        if !(0.0..=top).contains(&x) {
            continue;
        }
        let value_at = |m: f64| {
            let mut q = *c;
            q[a] = m;
            Stencil::at(g, &q).apply(data)
        };
        let slope = if x == 0.0 {
            0.5 * (value_at(1.0) - value_at(0.0))
        } else if x == top {
            0.5 * (value_at(top) - value_at(top - 1.0))
        } else if x == x.floor() {
            0.5 * (value_at(x + 1.0) - value_at(x - 1.0))
        } else {
            value_at(x.floor() + 1.0) - value_at(x.floor())
        };
        out[a] = slope / g.spacing[a];
    }
    out
}

/// Transpose of [`partial`]: returns `D^T y` for the same stencil.
pub(crate) fn partial_transpose(geom: &GridGeometry, y: &[f64], axis: usize) -> Vec<f64> {
    let n = geom.dims[axis];
    let stride = geom.stride(axis);
    let h = geom.spacing[axis];
    // coefficient of x_j in output i
    let coef = |i: usize, j: usize| -> f64 {
        if i == 0 {
            if j == 1 {
                1.0 / h
            } else if j == 0 {
                -1.0 / h
            } else {
                0.0
            }
        } else if i == n - 1 {
            if j == n - 1 {
                1.0 / h
            } else if j == n - 2 {
                -1.0 / h
            } else {
                0.0
            }
        } else if j == i + 1 {
            0.5 / h
        } else if j + 1 == i {
            -0.5 / h
        } else {
            0.0
        }
    };
    par::collect(geom.len(), |l| {
        let j = (l / stride) % n;
        let mut acc = 0.0;
        for i in j.saturating_sub(1)..=(j + 1).min(n - 1) {
            let c = coef(i, j);
            if c != 0.0 {
                acc += c * y[l - j * stride + i * stride];
            }
        }
        acc
    })
}

pub fn sample_scalar(g: &ScalarGrid, p: &[f64]) -> f64 {
    let c = g.geom.to_index_coords(p);
    Stencil::at(&g.geom, &c).apply(&g.data)
}

pub fn sample_vector(g: &VectorGrid, p: &[f64]) -> [f64; MAX_DIM] {
    let c = g.geom.to_index_coords(p);
    g.apply_stencil(&Stencil::at(&g.geom, &c))
}

/// Finite-difference derivative of `data` along `axis`.
pub(crate) fn partial(geom: &GridGeometry, data: &[f64], axis: usize) -> Vec<f64> {
    let n = geom.dims[axis];
    let stride = geom.stride(axis);
    let h = geom.spacing[axis];
    par::collect(geom.len(), |l| {
        let i = (l / stride) % n;
        if i == 0 {
            (data[l + stride] - data[l]) / h
        } else if i == n - 1 {
            (data[l] - data[l - stride]) / h
        } else {
            (data[l + stride] - data[l - stride]) / (2.0 * h)
        }
    })
}

pub fn gradient(g: &ScalarGrid) -> VectorGrid {
    let comps = (0..g.geom.ndim()).map(|k| partial(&g.geom, &g.data, k)).collect();
    VectorGrid { geom: g.geom, comps }
}

/// `div(I v)` with the same stencil as [`gradient`].
pub fn divergence_of_product(image: &ScalarGrid, v: &VectorGrid) -> Result<ScalarGrid> {
    image.geom.ensure_same(&v.geom)?;
    let geom = image.geom;
    let mut out = vec![0.0; geom.len()];
    for k in 0..geom.ndim() {
        let prod: Vec<f64> = image.data.iter().zip(&v.comps[k]).map(|(a, b)| a * b).collect();
        let d = partial(&geom, &prod, k);
        for (o, x) in out.iter_mut().zip(d) {
            *o += x;
        }
    }
    Ok(ScalarGrid { geom, data: out })
}

/// Per-voxel Jacobian matrices, stored as `d*d` scalar arrays in row-major
/// order: entry `(a, b)` is `d phi_a / d x_b`.
#[derive(Debug, Clone)]
pub struct JacobianField {
    geom: GridGeometry,
    entries: Vec<Vec<f64>>,
}

impl JacobianField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn entry(&self, row: usize, col: usize) -> &[f64] {
        &self.entries[row * self.geom.ndim() + col]
    }

    pub fn matrix_at(&self, linear: usize) -> Mat {
        let d = self.geom.ndim();
        let mut m = Mat::identity(d);
        for a in 0..d {
            for b in 0..d {
                m.m[a][b] = self.entries[a * d + b][linear];
            }
        }
        m
    }

    /// Matrix interpolated with a precomputed stencil.
    #[inline]
    pub fn matrix_with(&self, s: &Stencil) -> Mat {
        let d = self.geom.ndim();
        let mut m = Mat::identity(d);
        for a in 0..d {
            for b in 0..d {
                m.m[a][b] = s.apply(&self.entries[a * d + b]);
            }
        }
        m
    }

    pub fn determinant(&self) -> ScalarGrid {
        let data = par::collect(self.geom.len(), |l| self.matrix_at(l).det());
        ScalarGrid { geom: self.geom, data }
    }
}

/// Small dense matrix (d <= 3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat {
    pub d: usize,
    pub m: [[f64; MAX_DIM]; MAX_DIM],
}

impl Mat {
    pub fn identity(d: usize) -> Mat {
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        for (k, row) in m.iter_mut().enumerate().take(d) {
            row[k] = 1.0;
        }
        Mat { d, m }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        match self.d {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        }
    }

    /// Inverse via the adjugate; `None` if `|det| < min_det`.
    pub fn inverse(&self, min_det: f64) -> Option<Mat> {
        let det = self.det();
        if !(det.abs() >= min_det) {
            return None;
        }
        let m = &self.m;
        let mut r = Mat::identity(self.d);
        match self.d {
            1 => r.m[0][0] = 1.0 / m[0][0],
            2 => {
                r.m[0][0] = m[1][1] / det;
                r.m[0][1] = -m[0][1] / det;
                r.m[1][0] = -m[1][0] / det;
                r.m[1][1] = m[0][0] / det;
            }
            _ => {
                for i in 0..3 {
                    for j in 0..3 {
                        // cofactor of (j, i)
                        let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                        let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                        r.m[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
                    }
                }
            }
        }
        Some(r)
    }

    pub fn mul_vec(&self, v: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (a, o) in out.iter_mut().enumerate().take(self.d) {
            *o = (0..self.d).map(|b| self.m[a][b] * v[b]).sum();
        }
        out
    }
}

/// Finite-difference Jacobian of `x -> x + u(x)`.
pub fn jacobian_matrix(u: &VectorGrid) -> JacobianField {
    let d = u.ndim();
    let mut entries = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            let mut e = partial(&u.geom, &u.comps[a], b);
            if a == b {
                for x in e.iter_mut() {
                    *x += 1.0;
                }
            }
            entries.push(e);
        }
    }
    JacobianField { geom: u.geom, entries }
}

pub fn jacobian_determinant(u: &VectorGrid) -> ScalarGrid {
    jacobian_matrix(u).determinant()
}

/// Displacement of `outer ∘ inner`, both given as displacements.
pub fn compose(outer: &VectorGrid, inner: &VectorGrid) -> Result<VectorGrid> {
    outer.geom.ensure_same(&inner.geom)?;
    let geom = outer.geom;
    let comps = (0..geom.ndim())
        .map(|k| {
            par::collect(geom.len(), |l| {
                let ui = inner.at(l);
                let s = Stencil::displaced(&geom, l, &ui);
                ui[k] + s.apply(&outer.comps[k])
            })
        })
        .collect();
    Ok(VectorGrid { geom, comps })
}

/// Samples `field` at `x + u(x)` for every voxel `x`.
pub fn pull_back(field: &ScalarGrid, u: &VectorGrid) -> Result<ScalarGrid> {
    field.geom.ensure_same(&u.geom)?;
    let geom = field.geom;
    let data = par::collect(geom.len(), |l| Stencil::displaced(&geom, l, &u.at(l)).apply(&field.data));
    Ok(ScalarGrid { geom, data })
}

fn downsample_values(geom: &GridGeometry, data: &[f64], factor: usize, coarse: &GridGeometry) -> Vec<f64> {
    // anti-aliasing sigma is 0.5*factor voxels on every axis
    let smoothed = kernel::smooth_values_voxels(geom, data, &vec![0.5 * factor as f64; geom.ndim()]);
    par::collect(coarse.len(), |l| {
        let idx = coarse.voxel_index(l);
        let mut fine = [0usize; MAX_DIM];
        for k in 0..geom.ndim() {
            fine[k] = idx[k] * factor;
        }
        smoothed[geom.linear_index(&fine[..geom.ndim()])]
    })
}

pub fn downsample_scalar(g: &ScalarGrid, factor: usize) -> Result<ScalarGrid> {
    if factor == 1 {
        return Ok(g.clone());
    }
    let coarse = g.geom.subsampled(factor)?;
    Ok(ScalarGrid { geom: coarse, data: downsample_values(&g.geom, &g.data, factor, &coarse) })
}

pub fn downsample_vector(v: &VectorGrid, factor: usize) -> Result<VectorGrid> {
    if factor == 1 {
        return Ok(v.clone());
    }
    let coarse = v.geom.subsampled(factor)?;
    let comps = v.comps.iter().map(|c| downsample_values(&v.geom, c, factor, &coarse)).collect();
    Ok(VectorGrid { geom: coarse, comps })
}

fn check_same_extent(src: &GridGeometry, target: &GridGeometry) -> Result<()> {
    if src.ndim() != target.ndim() {
        return Err(GdrError::GeometryMismatch(format!("{} vs {} axes", src.ndim(), target.ndim())));
    }
    for k in 0..src.ndim() {
        let tol = 0.5 * src.spacing[k].max(target.spacing[k]) + 1e-9;
        let lo = (src.origin[k] - target.origin[k]).abs();
        let hi = (src.origin[k] + src.extent(k) - target.origin[k] - target.extent(k)).abs();
        if lo > tol || hi > tol {
            return Err(GdrError::GeometryMismatch(format!(
                "axis {k}: physical extents differ by more than half a coarse voxel ({lo:.3}, {hi:.3} mm)"
            )));
        }
    }
    Ok(())
}

fn resample_values(src: &GridGeometry, data: &[f64], target: &GridGeometry) -> Vec<f64> {
    par::collect(target.len(), |l| {
        let p = target.position(l);
        let c = src.to_index_coords(&p[..src.ndim()]);
        Stencil::at(src, &c).apply(data)
    })
}

/// Multilinear resampling of a vector field onto `target`.
pub fn upsample_field(v: &VectorGrid, target: &GridGeometry) -> Result<VectorGrid> {
    check_same_extent(&v.geom, target)?;
    if v.geom == *target {
        return Ok(v.clone());
    }
    let comps = v.comps.iter().map(|c| resample_values(&v.geom, c, target)).collect();
    Ok(VectorGrid { geom: *target, comps })
}

pub fn upsample_scalar(g: &ScalarGrid, target: &GridGeometry) -> Result<ScalarGrid> {
    check_same_extent(&g.geom, target)?;
    if g.geom == *target {
        return Ok(g.clone());
    }
    Ok(ScalarGrid { geom: *target, data: resample_values(&g.geom, &g.data, target) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(values: &[f64], h: f64) -> ScalarGrid {
        ScalarGrid::new(GridGeometry::isotropic(&[values.len()], h).unwrap(), values.to_vec()).unwrap()
    }

    fn geom2(n0: usize, n1: usize, h: f64) -> GridGeometry {
        GridGeometry::isotropic(&[n0, n1], h).unwrap()
    }

    #[test]
    fn geometry_rejects_degenerate_axes() {
        assert!(GridGeometry::isotropic(&[1, 4], 1.0).is_err());
        assert!(GridGeometry::new(&[4, 4], &[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(GridGeometry::new(&[4, 4], &[1.0], &[0.0, 0.0]).is_err());
        assert!(GridGeometry::isotropic(&[2, 2, 2, 2], 1.0).is_err());
    }

    #[test]
    fn linear_index_is_first_axis_fastest() {
        let g = GridGeometry::isotropic(&[3, 4, 5], 1.0).unwrap();
        assert_eq!(g.linear_index(&[1, 0, 0]), 1);
        assert_eq!(g.linear_index(&[0, 1, 0]), 3);
        assert_eq!(g.linear_index(&[0, 0, 1]), 12);
        for l in 0..g.len() {
            let idx = g.voxel_index(l);
            assert_eq!(g.linear_index(&idx[..3]), l);
        }
    }

    #[test]
    fn sample_constant_and_nodes() {
        let g = geom2(5, 4, 2.0);
        let c = ScalarGrid::filled(g, 3.25);
        assert_eq!(c.sample(&[1.3, 5.7]), 3.25);
        assert_eq!(c.sample(&[-40.0, 99.0]), 3.25);
        let f = ScalarGrid::from_fn(g, |p| p[0] * 10.0 + p[1] * p[1]);
        for l in 0..g.len() {
            let p = g.position(l);
            assert_eq!(f.sample(&p[..2]), f.values()[l]);
        }
    }

    #[test]
    fn sample_linear_interpolation_1d() {
        let g = line(&[0.0, 1.0], 1.0);
        assert_abs_diff_eq!(g.sample(&[0.25]), 0.25, epsilon = 1e-15);
        // clamp-to-edge
        assert_eq!(g.sample(&[-3.0]), 0.0);
        assert_eq!(g.sample(&[7.0]), 1.0);
    }

    #[test]
    fn sample_vector_cases() {
        let geom = GridGeometry::isotropic(&[2], 1.0).unwrap();
        let v = VectorGrid::new(geom, vec![vec![0.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(v.sample(&[0.5])[0], 1.0, epsilon = 1e-15);
        let g = geom2(4, 4, 1.0);
        let c = VectorGrid::constant(g, &[1.5, -2.0]);
        assert_eq!(&c.sample(&[1.7, 0.2])[..2], &[1.5, -2.0]);
        let f = VectorGrid::from_fn(g, |p| vec![p[0] * p[1], p[1] - p[0]]);
        assert_eq!(f.sample(&[2.0, 3.0]), f.at(g.linear_index(&[2, 3])));
    }

    #[test]
    fn gradient_constant_linear_quadratic() {
        let g = geom2(7, 6, 0.5);
        let c = gradient(&ScalarGrid::filled(g, 4.0));
        assert_eq!(c.max_norm(), 0.0);

        let ramp = gradient(&ScalarGrid::from_fn(g, |p| 3.0 * p[0] - 2.0 * p[1]));
        for l in 0..g.len() {
            assert_abs_diff_eq!(ramp.component(0)[l], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ramp.component(1)[l], -2.0, epsilon = 1e-12);
        }

        let h = 0.25;
        let q = line(&(0..9).map(|i| (i as f64 * h).powi(2)).collect::<Vec<_>>(), h);
        let dq = gradient(&q);
        for i in 1..8 {
            assert_abs_diff_eq!(dq.component(0)[i], 2.0 * i as f64 * h, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_examples() {
        let g = geom2(6, 6, 1.0);
        let one = ScalarGrid::filled(g, 1.0);
        let c = VectorGrid::constant(g, &[0.3, -0.7]);
        let d = divergence_of_product(&one, &c).unwrap();
        assert!(d.values().iter().all(|x| x.abs() < 1e-14));

        let id = VectorGrid::from_fn(g, |p| p.to_vec());
        let d = divergence_of_product(&one, &id).unwrap();
        for l in 0..g.len() {
            if g.is_interior(l, 1) {
                assert_abs_diff_eq!(d.values()[l], 2.0, epsilon = 1e-12);
            }
        }

        let g1 = GridGeometry::isotropic(&[8], 0.5).unwrap();
        let x = ScalarGrid::from_fn(g1, |p| p[0]);
        let v = VectorGrid::constant(g1, &[1.7]);
        let d = divergence_of_product(&x, &v).unwrap();
        for i in 1..7 {
            assert_abs_diff_eq!(d.values()[i], 1.7, epsilon = 1e-12);
        }

        let other = geom2(5, 6, 1.0);
        assert!(divergence_of_product(&ScalarGrid::filled(other, 1.0), &c).is_err());
    }

    #[test]
    fn divergence_matches_jacobian_trace() {
        let g = geom2(9, 7, 1.5);
        let u = VectorGrid::from_fn(g, |p| vec![(0.3 * p[0]).sin() * p[1], (0.2 * p[1]).cos() + 0.1 * p[0] * p[0]]);
        let div = divergence_of_product(&ScalarGrid::filled(g, 1.0), &u).unwrap();
        let jac = jacobian_matrix(&u);
        for l in 0..g.len() {
            if g.is_interior(l, 1) {
                let m = jac.matrix_at(l);
                let trace = m.m[0][0] + m.m[1][1];
                assert_abs_diff_eq!(div.values()[l], trace - 2.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let g = geom2(6, 5, 1.0);
        let zero = jacobian_matrix(&VectorGrid::zeros(g));
        for l in 0..g.len() {
            assert_eq!(zero.matrix_at(l), Mat::identity(2));
        }
        let double = jacobian_matrix(&VectorGrid::from_fn(g, |p| p.to_vec()));
        let alpha = 0.35;
        let shear = jacobian_matrix(&VectorGrid::from_fn(g, |p| vec![alpha * p[1], 0.0]));
        for l in 0..g.len() {
            if g.is_interior(l, 1) {
                let m = double.matrix_at(l);
                assert_abs_diff_eq!(m.m[0][0], 2.0, epsilon = 1e-12);
                assert_abs_diff_eq!(m.m[1][1], 2.0, epsilon = 1e-12);
                assert_abs_diff_eq!(m.m[0][1], 0.0, epsilon = 1e-12);
                let s = shear.matrix_at(l);
                assert_abs_diff_eq!(s.m[0][1], alpha, epsilon = 1e-12);
                assert_abs_diff_eq!(s.m[0][0], 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(s.m[1][0], 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(s.m[1][1], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn determinant_examples() {
        let g = GridGeometry::isotropic(&[5, 5, 4], 1.0).unwrap();
        let id = jacobian_determinant(&VectorGrid::zeros(g));
        assert!(id.values().iter().all(|&x| x == 1.0));
        let t = jacobian_determinant(&VectorGrid::constant(g, &[1.0, -2.0, 0.5]));
        assert!(t.values().iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let g2 = geom2(6, 6, 1.0);
        let scale = jacobian_determinant(&VectorGrid::from_fn(g2, |p| vec![p[0], 2.0 * p[1]]));
        for l in 0..g2.len() {
            if g2.is_interior(l, 1) {
                assert_abs_diff_eq!(scale.values()[l], 6.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matrix_inverse_3d() {
        let mut m = Mat::identity(3);
        m.m = [[2.0, 0.5, 0.1], [0.3, 1.5, -0.2], [0.0, 0.4, 1.1]];
        let inv = m.inverse(1e-8).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = (0..3).map(|k| m.m[i][k] * inv.m[k][j]).sum();
                assert_abs_diff_eq!(p, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
        let mut singular = Mat::identity(2);
        singular.m[1][1] = 0.0;
        assert!(singular.inverse(1e-8).is_none());
    }

    #[test]
    fn compose_examples() {
        let g = geom2(8, 8, 1.0);
        let f = VectorGrid::from_fn(g, |p| vec![0.1 * p[1], -0.05 * p[0]]);
        let id = VectorGrid::zeros(g);
        assert!(compose(&id, &f).unwrap().max_abs_diff(&f) < 1e-14);
        assert!(compose(&f, &id).unwrap().max_abs_diff(&f) < 1e-14);
        let a = VectorGrid::constant(g, &[0.5, 0.25]);
        let b = VectorGrid::constant(g, &[-1.0, 0.5]);
        let ab = compose(&a, &b).unwrap();
        assert!(ab.max_abs_diff(&VectorGrid::constant(g, &[-0.5, 0.75])) < 1e-14);

        // phi(x) = 2x, psi(x) = x + 1 -> phi(psi(x)) = 2x + 2, displacement x + 2.
        let g1 = GridGeometry::isotropic(&[10], 1.0).unwrap();
        let phi = VectorGrid::from_fn(g1, |p| vec![p[0]]);
        let psi = VectorGrid::constant(g1, &[1.0]);
        let c = compose(&phi, &psi).unwrap();
        for i in 1..8 {
            assert_abs_diff_eq!(c.component(0)[i], i as f64 + 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_is_associative_on_affine_maps() {
        let g = geom2(12, 12, 1.0);
        // Affine maps contracting toward the centre so compositions stay inside the grid.
        let c = 5.5;
        let a = VectorGrid::from_fn(g, |p| vec![0.1 * (p[0] - c) + 0.05 * (p[1] - c), -0.08 * (p[1] - c)]);
        let b = VectorGrid::from_fn(g, |p| vec![-0.12 * (p[0] - c), 0.06 * (p[0] - c) - 0.1 * (p[1] - c)]);
        let d = VectorGrid::from_fn(g, |p| vec![-0.05 * (p[0] - c) + 0.2, 0.04 * (p[1] - c) - 0.1]);
        let left = compose(&compose(&a, &b).unwrap(), &d).unwrap();
        let right = compose(&a, &compose(&b, &d).unwrap()).unwrap();
        let extent = g.extent(0);
        for l in (0..g.len()).filter(|&l| g.is_interior(l, 2)) {
            let (x, y) = (left.at(l), right.at(l));
            assert!((x[0] - y[0]).abs().max((x[1] - y[1]).abs()) < 1e-6 * extent);
        }
    }

    #[test]
    fn partial_transpose_is_adjoint() {
        let g = GridGeometry::isotropic(&[5, 4, 3], 0.7).unwrap();
        let x: Vec<f64> = (0..g.len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.len()).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        for axis in 0..3 {
            let dx = partial(&g, &x, axis);
            let dty = partial_transpose(&g, &y, axis);
            let lhs: f64 = dx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dty).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn interp_gradient_matches_central_differences() {
        let g = geom2(6, 5, 2.0);
        let f = ScalarGrid::from_fn(g, |p| (0.3 * p[0]).sin() * (1.0 + 0.1 * p[1] * p[1]));
        let eps = 1e-7;
        for c in [[1.3, 2.6, 0.0], [2.0, 3.0, 0.0], [0.0, 1.5, 0.0], [5.0, 4.0, 0.0], [2.5, 0.0, 0.0], [-1.0, 2.2, 0.0]]
        {
            let grad = interp_gradient(&g, &c, f.values());
            for a in 0..2 {
                let (mut hi, mut lo) = (c, c);
                hi[a] += eps;
                lo[a] -= eps;
                let fd = (Stencil::at(&g, &hi).apply(f.values()) - Stencil::at(&g, &lo).apply(f.values()))
                    / (2.0 * eps * g.spacing()[a]);
                assert_abs_diff_eq!(grad[a], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let g = geom2(9, 9, 1.0);
        let f = ScalarGrid::from_fn(g, |p| p[0] * p[1]);
        assert_eq!(downsample_scalar(&f, 1).unwrap(), f);
        let c = downsample_scalar(&ScalarGrid::filled(g, 2.5), 2).unwrap();
        assert_eq!(c.geometry().dims(), &[5, 5]);
        assert!(c.values().iter().all(|&x| (x - 2.5).abs() < 1e-12));

        let ramp = line(&(0..8).map(|i| i as f64).collect::<Vec<_>>(), 1.0);
        let d = downsample_scalar(&ramp, 2).unwrap();
        assert_eq!(d.geometry().dims(), &[4]);
        assert_eq!(d.geometry().spacing(), &[2.0]);
        for i in 0..4 {
            // interior kept nodes are exact; the two ends see the mirrored boundary
            let tol = if i == 2 { 1e-9 } else { 0.5 };
            assert_abs_diff_eq!(d.values()[i], 2.0 * i as f64, epsilon = tol);
        }

        let tiny = line(&[1.0, 2.0, 3.0], 1.0);
        assert!(downsample_scalar(&tiny, 4).is_err());
    }

    #[test]
    fn upsample_examples() {
        let g = geom2(5, 5, 2.0);
        let v = VectorGrid::from_fn(g, |p| vec![p[0] * 0.1, 1.0 - p[1]]);
        assert_eq!(upsample_field(&v, &g).unwrap(), v);
        let fine = geom2(9, 9, 1.0);
        let c = upsample_field(&VectorGrid::constant(g, &[0.3, 0.2]), &fine).unwrap();
        assert!(c.max_abs_diff(&VectorGrid::constant(fine, &[0.3, 0.2])) < 1e-15);

        let g1 = GridGeometry::isotropic(&[5], 2.0).unwrap();
        let lin = VectorGrid::from_fn(g1, |p| vec![3.0 * p[0] - 1.0]);
        let f1 = GridGeometry::isotropic(&[9], 1.0).unwrap();
        let up = upsample_field(&lin, &f1).unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(up.component(0)[i], 3.0 * i as f64 - 1.0, epsilon = 1e-12);
        }

        let far = geom2(20, 20, 1.0);
        assert!(upsample_field(&v, &far).is_err());
    }
}
