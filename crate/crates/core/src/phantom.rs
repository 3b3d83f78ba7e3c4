//! Procedural lung phantoms with known motion, and artifact injection.
//!
//! The superior-inferior axis is the last grid axis, increasing towards the
//! feet. A phase at factor `t` is the base image pulled back through
//! `psi_t = Id + t u` with the mass-preserving rule
//! `CT(t) = |D psi_t| (CT o psi_t + 1000) - 1000`, so `psi_t` plays the role
//! of the inverse map `phi_t^{-1}` estimated by a regression.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{self, HU_AIR};
use crate::error::{GdrError, Result};
use crate::grid::{self, GridGeometry, LandmarkSet, ScalarGrid, VectorGrid};
use crate::regression::TimeSeries;

pub const HU_LUNG: f64 = -850.0;
pub const HU_SOFT_TISSUE: f64 = 40.0;
pub const HU_VESSEL: f64 = -150.0;
/// Smallest `det(I + Du)` accepted for a generated displacement.
pub const MIN_DEFORMATION_DET: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Signed distance-like coordinate: negative inside, in units of the
    /// smallest radius.
    fn level(&self, s: &[f64]) -> f64 {
        let r2: f64 = s.iter().enumerate().map(|(k, x)| ((x - self.center[k]) / self.radii[k]).powi(2)).sum();
        let rmin = self.radii[..s.len()].iter().cloned().fold(f64::INFINITY, f64::min);
        (r2.sqrt() - 1.0) * rmin
    }
}

#[derive(Debug, Clone, Copy)]
struct Vessel {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Vessel {
    fn distance(&self, s: &[f64]) -> f64 {
        let d = s.len();
        let ab: Vec<f64> = (0..d).map(|k| self.b[k] - self.a[k]).collect();
        let ap: Vec<f64> = (0..d).map(|k| s[k] - self.a[k]).collect();
        let len2: f64 = ab.iter().map(|x| x * x).sum();
        let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
        (0..d).map(|k| (ap[k] - t * ab[k]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Body with two lungs, a diaphragm below them and vessels inside,
/// defined analytically in normalised coordinates `s in [0,1]^d`.
#[derive(Debug, Clone)]
pub struct LungPhantom {
    geom: GridGeometry,
    body: Ellipsoid,
    lungs: [Ellipsoid; 2],
    vessels: Vec<Vessel>,
    /// Edge blur in normalised units.
    edge: f64,
}

fn smooth_step(level: f64, width: f64) -> f64 {
    0.5 * (1.0 - (level / width).tanh())
}

impl LungPhantom {
    pub fn new(geom: GridGeometry, seed: u64) -> Result<Self> {
        let d = geom.ndim();
        if d < 2 {
            return Err(GdrError::InvalidGeometry("phantoms need at least two axes".into()));
        }
        if geom.dims().iter().any(|&n| n < 16) {
            return Err(GdrError::InvalidGeometry(format!(
                "phantom grid {:?} is too small (min 16 per axis)",
                geom.dims()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = d - 1;
        let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-s..s);

        let mut body = Ellipsoid { center: [0.5; 3], radii: [0.44; 3] };
        body.radii[z] = 0.46;
        let mut lungs = [body; 2];
        for (side, lung) in lungs.iter_mut().enumerate() {
            let sign = if side == 0 { -1.0 } else { 1.0 };
            lung.center = [0.5; 3];
            lung.center[0] = 0.5 + sign * (0.185 + jitter(&mut rng, 0.015));
            lung.center[z] = 0.43 + jitter(&mut rng, 0.02);
            lung.radii = [0.3; 3];
            lung.radii[0] = 0.14 + jitter(&mut rng, 0.01);
            lung.radii[z] = 0.25 + jitter(&mut rng, 0.015);
        }
        let min_extent = (0..d).map(|k| geom.extent(k)).fold(f64::INFINITY, f64::min);
        let voxel = geom.spacing()[0] / min_extent;
        let mut vessels = Vec::new();
        for lung in &lungs {
            for _ in 0..5 {
                let point = |rng: &mut ChaCha8Rng| {
                    let mut p = [0.5; 3];
                    for k in 0..d {
                        p[k] = lung.center[k] + 0.75 * lung.radii[k] * rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
                    }
                    p
                };
                let a = point(&mut rng);
                let b = point(&mut rng);
                vessels.push(Vessel { a, b, radius: voxel * rng.gen_range(0.9..1.4) });
            }
        }
        Ok(LungPhantom { geom, body, lungs, vessels, edge: 0.6 * voxel })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    fn normalised(&self, p: &[f64]) -> Vec<f64> {
        (0..self.geom.ndim()).map(|k| (p[k] - self.geom.origin()[k]) / self.geom.extent(k)).collect()
    }

    /// Fraction of lung tissue at normalised point `s`.
    fn lung_fraction(&self, s: &[f64]) -> f64 {
        self.lungs.iter().map(|l| smooth_step(l.level(s), self.edge)).fold(0.0, f64::max)
    }

    /// CT value at physical point `p`.
    pub fn hu(&self, p: &[f64]) -> f64 {
        let s = self.normalised(p);
        let inside = smooth_step(self.body.level(&s), self.edge);
        let lung = self.lung_fraction(&s);
        let vessel =
            self.vessels.iter().map(|v| (-(v.distance(&s) / v.radius).powi(2) / 2.0).exp()).fold(0.0, f64::max);
        let lung_hu = HU_LUNG + (HU_VESSEL - HU_LUNG) * vessel;
        let tissue = HU_SOFT_TISSUE + (lung_hu - HU_SOFT_TISSUE) * lung;
        HU_AIR + (tissue - HU_AIR) * inside
    }

    pub fn base_hu(&self) -> ScalarGrid {
        ScalarGrid::from_fn(self.geom, |p| self.hu(p))
    }

    /// 1 inside the lungs, 0 elsewhere.
    pub fn lung_mask(&self) -> ScalarGrid {
        ScalarGrid::from_fn(self.geom, |p| if self.lung_fraction(&self.normalised(p)) >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Physical position of the lowest lung point along the last axis.
    pub fn diaphragm_mm(&self) -> f64 {
        let z = self.geom.ndim() - 1;
        let s = self.lungs.iter().map(|l| l.center[z] + l.radii[z]).fold(f64::NEG_INFINITY, f64::max);
        self.geom.origin()[z] + s * self.geom.extent(z)
    }

    /// Lateral centre of each lung (normalised first-axis coordinate).
    fn lung_centers(&self) -> [f64; 2] {
        [self.lungs[0].center[0], self.lungs[1].center[0]]
    }
}

/// Smooth diaphragm-like motion along the last axis: one Gaussian bump per
/// lung centred on its base, windowed to vanish on the grid boundary.
pub fn make_analytic_deformation(phantom: &LungPhantom, amplitude_mm: f64, seed: u64) -> Result<VectorGrid> {
    let geom = *phantom.geometry();
    let d = geom.ndim();
    let z = d - 1;
    if !amplitude_mm.is_finite() {
        return Err(GdrError::InvalidParameter("amplitude must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1a9);
    let zc = (phantom.diaphragm_mm() - geom.origin()[z]) / geom.extent(z) - 0.08;
    let centers = phantom.lung_centers();
    let widths = [0.2 + rng.gen_range(-0.02..0.02), 0.2 + rng.gen_range(-0.02..0.02)];
    let gains = [1.0, 0.85 + rng.gen_range(-0.1..0.1)];
    let u = VectorGrid::from_fn(geom, |p| {
        let s: Vec<f64> = (0..d).map(|k| (p[k] - geom.origin()[k]) / geom.extent(k)).collect();
        let window: f64 = s.iter().map(|x| (std::f64::consts::PI * x).sin().powi(2)).product();
        let mut uz = 0.0;
        for i in 0..2 {
            let mut r2 = (s[0] - centers[i]).powi(2) + (s[z] - zc).powi(2);
            for k in 1..z {
                r2 += (s[k] - 0.5).powi(2);
            }
            uz += gains[i] * (-r2 / (2.0 * widths[i] * widths[i])).exp();
        }
        let mut out = vec![0.0; d];
        out[z] = amplitude_mm * uz * window;
        out
    });
    let det = grid::jacobian_determinant(&u);
    let min = det.min();
    if !(min > MIN_DEFORMATION_DET) {
        return Err(GdrError::InvalidParameter(format!(
            "amplitude {amplitude_mm} mm folds the grid (min det {min:.3}, need > {MIN_DEFORMATION_DET})"
        )));
    }
    Ok(u)
}

/// Landmarks located in one phase, with their true positions in the base.
#[derive(Debug, Clone)]
pub struct PhaseLandmarks {
    pub phase: usize,
    pub points: LandmarkSet,
    pub truth: LandmarkSet,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub base_hu: ScalarGrid,
    pub displacement: VectorGrid,
    pub factors: Vec<f64>,
    /// `t_i u`, displacements of `psi_i`.
    pub maps: Vec<VectorGrid>,
    /// `|D psi_i|` in phase coordinates.
    pub jacobians: Vec<ScalarGrid>,
    /// Lung region of each phase.
    pub lung_masks: Vec<ScalarGrid>,
    pub landmarks: Option<PhaseLandmarks>,
}

/// Evenly spaced factors `0, 1/(n-1), ..., 1`.
pub fn phase_factors(phases: usize) -> Result<Vec<f64>> {
    if phases < 2 {
        return Err(GdrError::InvalidParameter(format!("{phases} phases (need at least 2)")));
    }
    Ok((0..phases).map(|i| i as f64 / (phases - 1) as f64).collect())
}

/// Warps the base through `Id + t u` for every factor with the
/// mass-preserving HU rule. Observation times equal the factors, which must
/// run from 0 to 1.
pub fn synthesize_timeseries(
    base_hu: &ScalarGrid,
    lung_mask: &ScalarGrid,
    u: &VectorGrid,
    factors: &[f64],
) -> Result<(TimeSeries, GroundTruth)> {
    base_hu.geometry().ensure_same(u.geometry())?;
    base_hu.geometry().ensure_same(lung_mask.geometry())?;
    if factors.windows(2).any(|w| !(w[1] > w[0])) || factors.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(GdrError::InvalidParameter("factors must increase strictly within [0, 1]".into()));
    }
    let mut images = Vec::new();
    let mut maps = Vec::new();
    let mut jacobians = Vec::new();
    let mut lung_masks = Vec::new();
    for (i, &t) in factors.iter().enumerate() {
        let map = u.scaled(t);
        let jac = grid::jacobian_determinant(&map);
        if let Some((voxel, &det)) = jac.values().iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(GdrError::NonPositiveJacobian { time_index: i, voxel, det });
        }
        let warped = grid::pull_back(base_hu, &map)?;
        let hu = warped.zip_map(&jac, |c, j| j * (c - HU_AIR) + HU_AIR)?;
        images.push(density::hu_to_density(&hu)?);
        lung_masks.push(grid::pull_back(lung_mask, &map)?.map(|m| if m >= 0.5 { 1.0 } else { 0.0 }));
        maps.push(map);
        jacobians.push(jac);
    }
    let masks = images.iter().map(|i| ScalarGrid::filled(*i.geometry(), 1.0)).collect();
    let ts = TimeSeries::new(images, masks, factors.to_vec())?;
    let truth = GroundTruth {
        base_hu: base_hu.clone(),
        displacement: u.clone(),
        factors: factors.to_vec(),
        maps,
        jacobians,
        lung_masks,
        landmarks: None,
    };
    Ok((ts, truth))
}

/// Parameters of a complete synthetic experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub spacing_mm: f64,
    pub amplitude_mm: f64,
    pub phases: usize,
    pub seed: u64,
    #[serde(default)]
    pub landmarks: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { dims: vec![48, 48], spacing_mm: 5.0, amplitude_mm: 16.0, phases: 6, seed: 0, landmarks: 0 }
    }
}

/// A generated experiment: the anatomy, the clean series and its truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub anatomy: LungPhantom,
    pub series: TimeSeries,
    pub truth: GroundTruth,
}

impl Phantom {
    pub fn generate(spec: &PhantomSpec) -> Result<Self> {
        let geom = GridGeometry::isotropic(&spec.dims, spec.spacing_mm)?;
        let anatomy = LungPhantom::new(geom, spec.seed)?;
        let u = make_analytic_deformation(&anatomy, spec.amplitude_mm, spec.seed)?;
        let factors = phase_factors(spec.phases)?;
        let (series, mut truth) = synthesize_timeseries(&anatomy.base_hu(), &anatomy.lung_mask(), &u, &factors)?;
        if spec.landmarks > 0 {
            truth.landmarks = Some(place_landmarks(&truth, spec.phases - 1, spec.landmarks, spec.seed)?);
        }
        Ok(Phantom { spec: spec.clone(), anatomy, series, truth })
    }

    /// Position of the diaphragm along the last axis in phase `i`.
    pub fn diaphragm_mm(&self, i: usize) -> f64 {
        let z = self.anatomy.geometry().ndim() - 1;
        let geom = self.anatomy.geometry();
        // largest displacement along the base of the lungs, sampled at the lung centres
        let d0 = self.anatomy.diaphragm_mm();
        let centers = self.anatomy.lung_centers();
        let shift = centers
            .iter()
            .map(|c| {
                let mut p = vec![0.0; geom.ndim()];
                for k in 0..geom.ndim() {
                    p[k] = geom.origin()[k] + 0.5 * geom.extent(k);
                }
                p[0] = geom.origin()[0] + c * geom.extent(0);
                p[z] = d0;
                grid::sample_vector(&self.truth.maps[i], &p)[z]
            })
            .fold(0.0, f64::max);
        d0 - shift
    }

    /// Start of a duplication slab whose source (the slab below it)
    /// straddles the diaphragm of phase `i`.
    pub fn duplication_start_mm(&self, i: usize, thickness_mm: f64) -> f64 {
        self.diaphragm_mm(i) - 1.5 * thickness_mm
    }
}

/// Seeded lung points in phase `phase` where the motion is at least half its
/// maximum, with their true base positions `x + t u(x)`.
pub fn place_landmarks(truth: &GroundTruth, phase: usize, count: usize, seed: u64) -> Result<PhaseLandmarks> {
    let map = truth.maps.get(phase).ok_or_else(|| GdrError::InvalidParameter(format!("phase {phase} out of range")))?;
    let geom = *map.geometry();
    let norm: Vec<f64> = (0..geom.len()).map(|l| map.at(l).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let peak = norm.iter().cloned().fold(0.0, f64::max);
    let mask = truth.lung_masks[phase].values();
    let mut candidates: Vec<usize> =
        (0..geom.len()).filter(|&l| mask[l] > 0.5 && norm[l] >= 0.5 * peak && geom.is_interior(l, 2)).collect();
    if candidates.len() < count {
        return Err(GdrError::InvalidParameter(format!(
            "only {} candidate landmark voxels for {count} landmarks",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a4d_3a4c);
    candidates.shuffle(&mut rng);
    let points: Vec<Vec<f64>> = candidates[..count].iter().map(|&l| geom.position(l)[..geom.ndim()].to_vec()).collect();
    let points = LandmarkSet::new(points, true);
    let truth_points = propagate_landmarks(&points, map);
    Ok(PhaseLandmarks { phase, points, truth: truth_points })
}

/// Maps every point through `x -> x + u(x)`.
pub fn propagate_landmarks(lm: &LandmarkSet, u: &VectorGrid) -> LandmarkSet {
    let points = lm
        .points
        .iter()
        .map(|p| {
            let d = grid::sample_vector(u, p);
            p.iter().enumerate().map(|(k, x)| x + d[k]).collect()
        })
        .collect();
    LandmarkSet::new(points, lm.paired)
}

/// Displacement of the inverse map by fixed-point iteration
/// `v(y) = -u(y + v(y))`.
pub fn invert_displacement(u: &VectorGrid, iterations: usize) -> Result<VectorGrid> {
    let mut v = u.scaled(-1.0);
    for _ in 0..iterations {
        let composed = grid::compose(u, &v)?;
        // composed = v + u(y + v); the update is v - composed
        let mut next = v.clone();
        next.axpy(-1.0, &composed)?;
        v = next;
    }
    Ok(v)
}

/// Number of rows a slab of `thickness_mm` covers along the last axis.
pub fn slab_rows(geom: &GridGeometry, thickness_mm: f64) -> usize {
    let z = geom.ndim() - 1;
    (thickness_mm / geom.spacing()[z]).round().max(0.0) as usize
}

fn row_of(geom: &GridGeometry, linear: usize) -> usize {
    geom.voxel_index(linear)[geom.ndim() - 1]
}

/// Mask that is 0 on rows `[start, start + rows)` of the last axis.
pub fn slab_mask(geom: &GridGeometry, start: usize, rows: usize) -> ScalarGrid {
    ScalarGrid::new(
        *geom,
        (0..geom.len()).map(|l| if (start..start + rows).contains(&row_of(geom, l)) { 0.0 } else { 1.0 }).collect(),
    )
    .expect("length matches geometry")
}

/// Duplication artifact in phase `phase`: the slab of `thickness_mm`
/// starting at `start_mm` (last axis) is overwritten by the slab directly
/// below it, so whatever that slab contains appears twice. Returns the
/// modified series and the artifact mask of that phase (0 on the slab).
/// Other phases and all masks are unchanged.
pub fn inject_duplication(
    ts: &TimeSeries,
    phase: usize,
    thickness_mm: f64,
    start_mm: f64,
) -> Result<(TimeSeries, ScalarGrid)> {
    let geom = *ts.geometry();
    if phase >= ts.len() {
        return Err(GdrError::InvalidParameter(format!("phase {phase} out of range (series has {})", ts.len())));
    }
    let z = geom.ndim() - 1;
    let n = geom.dims()[z];
    let rows = slab_rows(&geom, thickness_mm);
    if rows == 0 {
        return Ok((ts.clone(), ScalarGrid::filled(geom, 1.0)));
    }
    let start = ((start_mm - geom.origin()[z]) / geom.spacing()[z]).round();
    if !(thickness_mm > 0.0) || start < 0.0 || start as usize + 2 * rows > n {
        return Err(GdrError::InvalidParameter(format!(
            "duplication slab of {rows} rows at row {start} does not fit {n} rows with a source below it"
        )));
    }
    let start = start as usize;
    let stride = geom.stride(z);
    let src = ts.images()[phase].values();
    let data = (0..geom.len())
        .map(|l| if (start..start + rows).contains(&row_of(&geom, l)) { src[l + rows * stride] } else { src[l] })
        .collect();
    let mut images = ts.images().to_vec();
    images[phase] = ScalarGrid::new(geom, data)?;
    let series = TimeSeries::new(images, ts.masks().to_vec(), ts.times().to_vec())?;
    Ok((series, slab_mask(&geom, start, rows)))
}

/// Random dropout slabs: non-overlapping within a phase, independent across
/// phases, added until the masked share of all voxels is within half a slab
/// of `fraction`.
pub fn make_dropout_masks(ts: &TimeSeries, fraction: f64, slab_mm: f64, seed: u64) -> Result<Vec<ScalarGrid>> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(GdrError::InvalidParameter(format!("dropout fraction {fraction} outside [0, 0.5]")));
    }
    let geom = *ts.geometry();
    let z = geom.ndim() - 1;
    let n = geom.dims()[z];
    let rows = slab_rows(&geom, slab_mm);
    if rows == 0 || rows > n {
        return Err(GdrError::InvalidParameter(format!("slab of {slab_mm} mm is {rows} rows on a {n}-row grid")));
    }
    let phases = ts.len();
    let total_rows = (phases * n) as f64;
    let target = fraction * total_rows;
    let mut taken = vec![vec![false; n]; phases];
    let mut masked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    while (masked as f64) + 0.5 * rows as f64 <= target {
        attempts += 1;
        if attempts > 100_000 {
            return Err(GdrError::InvalidParameter(format!(
                "cannot place {fraction} dropout with {rows}-row slabs on this grid"
            )));
        }
        let p = rng.gen_range(0..phases);
        let start = rng.gen_range(0..=n - rows);
        if taken[p][start..start + rows].iter().any(|&t| t) {
            continue;
        }
        taken[p][start..start + rows].iter_mut().for_each(|t| *t = true);
        masked += rows;
    }
    Ok(taken
        .iter()
        .map(|rows_taken| {
            ScalarGrid::new(
                geom,
                (0..geom.len()).map(|l| if rows_taken[row_of(&geom, l)] { 0.0 } else { 1.0 }).collect(),
            )
            .expect("length matches geometry")
        })
        .collect())
}

/// Phase whose data replaces masked rows of phase `i`: the one farthest
/// away in the series.
pub fn farthest_phase(i: usize, phases: usize) -> usize {
    if 2 * i < phases {
        phases - 1
    } else {
        0
    }
}

/// Applies dropout masks and corrupts the masked voxels of every phase with
/// the same voxels of [`farthest_phase`], emulating stacks sorted into the
/// wrong breathing phase.
pub fn apply_dropout(ts: &TimeSeries, masks: Vec<ScalarGrid>) -> Result<TimeSeries> {
    if masks.len() != ts.len() {
        return Err(GdrError::InvalidParameter(format!("{} masks for {} phases", masks.len(), ts.len())));
    }
    let images = ts
        .images()
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let other = ts.images()[farthest_phase(i, ts.len())].values();
            let m = masks[i].values();
            let data = img.values().iter().enumerate().map(|(l, &x)| if m[l] < 0.5 { other[l] } else { x }).collect();
            ScalarGrid::new(*img.geometry(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    TimeSeries::new(images, masks, ts.times().to_vec())
}

/// Zeroes the rows of `mask` within `rows` of any masked row.
pub fn dilate_slab_mask(mask: &ScalarGrid, rows: usize) -> ScalarGrid {
    let geom = *mask.geometry();
    let n = geom.dims()[geom.ndim() - 1];
    let mut hit = vec![false; n];
    for (l, &m) in mask.values().iter().enumerate() {
        if m < 0.5 {
            hit[row_of(&geom, l)] = true;
        }
    }
    let grown: Vec<bool> = (0..n).map(|r| (r.saturating_sub(rows)..=(r + rows).min(n - 1)).any(|q| hit[q])).collect();
    ScalarGrid::new(geom, (0..geom.len()).map(|l| if grown[row_of(&geom, l)] { 0.0 } else { 1.0 }).collect())
        .expect("length matches geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Phantom {
        Phantom::generate(&PhantomSpec { dims: vec![40, 40], ..PhantomSpec::default() }).unwrap()
    }

    #[test]
    fn anatomy_has_expected_values() {
        let p = small();
        let hu = p.truth.base_hu.values();
        assert!(hu.iter().any(|&x| (x - HU_AIR).abs() < 1.0));
        assert!(hu.iter().any(|&x| (x - HU_LUNG).abs() < 20.0));
        assert!(hu.iter().any(|&x| (x - HU_SOFT_TISSUE).abs() < 5.0));
        let lung = p.anatomy.lung_mask();
        assert!(lung.sum() > 0.1 * lung.len() as f64);
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let p = small();
        let u = make_analytic_deformation(&p.anatomy, 0.0, 3).unwrap();
        assert!(u.is_zero());
    }

    #[test]
    fn deformation_is_invertible_and_deterministic() {
        let p = small();
        let u = make_analytic_deformation(&p.anatomy, 16.0, 5).unwrap();
        assert!(grid::jacobian_determinant(&u).min() > MIN_DEFORMATION_DET);
        assert_eq!(u, make_analytic_deformation(&p.anatomy, 16.0, 5).unwrap());
        assert!(make_analytic_deformation(&p.anatomy, 400.0, 5).is_err());
    }

    #[test]
    fn phases_conserve_mass() {
        let p = small();
        let m0 = p.series.images()[0].integral();
        for img in p.series.images() {
            assert!((img.integral() / m0 - 1.0).abs() < 0.01);
        }
        assert!(p.truth.jacobians.iter().all(|j| j.min() > 0.0));
        let base = density::hu_to_density(&p.truth.base_hu).unwrap();
        let diff = base.zip_map(&p.series.images()[0], |a, b| (a - b).abs()).unwrap();
        assert!(diff.max() < 1e-12);
    }

    #[test]
    fn full_factor_phase_is_density_action_of_the_map() {
        let p = small();
        let last = p.series.len() - 1;
        let base = density::hu_to_density(&p.truth.base_hu).unwrap();
        let acted = density::density_action(&base, &p.truth.maps[last], &p.truth.jacobians[last]).unwrap();
        let diff = acted.zip_map(&p.series.images()[last], |a, b| (a - b).abs()).unwrap();
        assert!(diff.max() < 1e-12);
    }

    #[test]
    fn duplication_is_local() {
        let p = small();
        let (ts, mask) = inject_duplication(&p.series, 3, 20.0, p.duplication_start_mm(3, 20.0)).unwrap();
        let before = p.series.images()[3].values();
        let after = ts.images()[3].values();
        let mut changed = 0;
        for l in 0..before.len() {
            if before[l] != after[l] {
                changed += 1;
                assert_eq!(mask.values()[l], 0.0);
            }
        }
        assert!(changed > 0);
        assert_eq!(mask.values().iter().filter(|&&m| m == 0.0).count(), 4 * 40);
        for i in [0, 1, 2, 4, 5] {
            assert_eq!(ts.images()[i], p.series.images()[i]);
        }
        let (same, ones) = inject_duplication(&p.series, 3, 0.0, 100.0).unwrap();
        assert_eq!(same, p.series);
        assert_eq!(ones.min(), 1.0);
        assert!(inject_duplication(&p.series, 9, 20.0, 100.0).is_err());
    }

    #[test]
    fn dropout_reaches_target() {
        let p = small();
        let rows = slab_rows(p.series.geometry(), 12.0) as f64;
        let total = (p.series.len() * 40) as f64;
        for fraction in [0.0, 0.1, 0.3, 0.5] {
            let masks = make_dropout_masks(&p.series, fraction, 12.0, 4).unwrap();
            let zeros: f64 = masks.iter().map(|m| m.values().iter().filter(|&&x| x == 0.0).count() as f64).sum();
            let achieved = zeros / 40.0 / total;
            assert!((achieved - fraction).abs() <= 0.5 * rows / total + 1e-12, "{fraction}: {achieved}");
            assert_eq!(masks, make_dropout_masks(&p.series, fraction, 12.0, 4).unwrap());
        }
        assert!(make_dropout_masks(&p.series, 0.6, 12.0, 4).is_err());
    }

    #[test]
    fn landmarks_round_trip_through_true_inverse() {
        let spec = PhantomSpec { dims: vec![40, 40], landmarks: 12, ..PhantomSpec::default() };
        let p = Phantom::generate(&spec).unwrap();
        let lm = p.truth.landmarks.as_ref().unwrap();
        let inv = invert_displacement(&p.truth.maps[lm.phase], 30).unwrap();
        let back = propagate_landmarks(&lm.truth, &inv);
        for (a, b) in back.points.iter().zip(&lm.points.points) {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.5 * spec.spacing_mm, "{d}");
        }
        let shift = VectorGrid::constant(*p.series.geometry(), &[0.0, 3.0]);
        let moved = propagate_landmarks(&lm.points, &shift);
        assert!(moved.points.iter().zip(&lm.points.points).all(|(a, b)| (a[1] - b[1] - 3.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_corrupts_only_masked_voxels() {
        let p = small();
        let masks = make_dropout_masks(&p.series, 0.2, 12.0, 1).unwrap();
        let ts = apply_dropout(&p.series, masks.clone()).unwrap();
        assert_eq!(ts.masks(), &masks[..]);
        for i in 0..ts.len() {
            let j = farthest_phase(i, ts.len());
            for l in 0..masks[i].len() {
                let expected = if masks[i].values()[l] == 0.0 {
                    p.series.images()[j].values()[l]
                } else {
                    p.series.images()[i].values()[l]
                };
                assert_eq!(ts.images()[i].values()[l], expected);
            }
        }
    }

    #[test]
    fn dilation_grows_slabs() {
        let g = GridGeometry::isotropic(&[8, 20], 1.0).unwrap();
        let m = slab_mask(&g, 8, 3);
        let d = dilate_slab_mask(&m, 2);
        assert_eq!(d.values().iter().filter(|&&x| x == 0.0).count(), 8 * 7);
    }
}
