//! Directory layouts for series, ground truth and regression results. Each
//! directory holds a JSON manifest whose file entries are relative to it.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::table;
use super::volume::{read_mask, read_scalar, read_vector, write_mask, write_scalar, write_vector};
use crate::error::{GdrError, Result};
use crate::grid::{LandmarkSet, ScalarGrid, VectorGrid};
use crate::phantom::{GroundTruth, PhantomSpec, PhaseLandmarks};
use crate::regression::{CostRecord, Driver, LevelSummary, Mode, RegressionConfig, RegressionResult, TimeSeries};

pub const SERIES_MANIFEST: &str = "series.json";
pub const TRUTH_MANIFEST: &str = "truth.json";
pub const RESULT_MANIFEST: &str = "result.json";
pub const HISTORY_SCHEMA: &str = "cost-history";
pub const MANIFEST_VERSION: u32 = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| GdrError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GdrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GdrError::Config(format!("{}: {e}", path.display())))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != MANIFEST_VERSION {
        return Err(GdrError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("manifest version {version}, expected {MANIFEST_VERSION}"),
        });
    }
    Ok(())
}

fn indexed(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:02}.vol")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub version: u32,
    pub times: Vec<f64>,
    pub images: Vec<String>,
    pub masks: Vec<String>,
}

/// Writes density images and 0/1 masks.
pub fn write_series(dir: &Path, ts: &TimeSeries) -> Result<()> {
    let images: Vec<String> = (0..ts.len()).map(|i| indexed("image", i)).collect();
    let masks: Vec<String> = (0..ts.len()).map(|i| indexed("mask", i)).collect();
    for (i, (img, mask)) in ts.images().iter().zip(ts.masks()).enumerate() {
        write_scalar(&dir.join(&images[i]), img)?;
        write_mask(&dir.join(&masks[i]), mask)?;
    }
    let m = SeriesManifest { version: MANIFEST_VERSION, times: ts.times().to_vec(), images, masks };
    write_json(&dir.join(SERIES_MANIFEST), &m)
}

pub fn read_series(dir: &Path) -> Result<TimeSeries> {
    let path = dir.join(SERIES_MANIFEST);
    let m: SeriesManifest = read_json(&path)?;
    check_version(&path, m.version)?;
    let images = m.images.iter().map(|f| read_scalar(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let masks = m.masks.iter().map(|f| read_mask(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    TimeSeries::new(images, masks, m.times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub phase: usize,
    /// Positions in the phase image.
    pub points: Vec<Vec<f64>>,
    /// True corresponding positions in the base image.
    pub truth: Vec<Vec<f64>>,
}

impl From<&PhaseLandmarks> for LandmarkRecord {
    fn from(l: &PhaseLandmarks) -> Self {
        LandmarkRecord { phase: l.phase, points: l.points.points.clone(), truth: l.truth.points.clone() }
    }
}

impl From<LandmarkRecord> for PhaseLandmarks {
    fn from(r: LandmarkRecord) -> Self {
        PhaseLandmarks {
            phase: r.phase,
            points: LandmarkSet::new(r.points, true),
            truth: LandmarkSet::new(r.truth, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthManifest {
    pub version: u32,
    pub spec: Option<PhantomSpec>,
    pub base_hu: String,
    pub displacement: String,
    pub factors: Vec<f64>,
    pub maps: Vec<String>,
    pub jacobians: Vec<String>,
    pub lung_masks: Vec<String>,
    pub landmarks: Option<LandmarkRecord>,
}

pub fn write_truth(dir: &Path, truth: &GroundTruth, spec: Option<&PhantomSpec>) -> Result<()> {
    let n = truth.factors.len();
    let m = TruthManifest {
        version: MANIFEST_VERSION,
        spec: spec.cloned(),
        base_hu: "truth_base_hu.vol".into(),
        displacement: "truth_displacement.vol".into(),
        factors: truth.factors.clone(),
        maps: (0..n).map(|i| indexed("truth_map", i)).collect(),
        jacobians: (0..n).map(|i| indexed("truth_jacobian", i)).collect(),
        lung_masks: (0..n).map(|i| indexed("truth_lung", i)).collect(),
        landmarks: truth.landmarks.as_ref().map(LandmarkRecord::from),
    };
    write_scalar(&dir.join(&m.base_hu), &truth.base_hu)?;
    write_vector(&dir.join(&m.displacement), &truth.displacement)?;
    for i in 0..n {
        write_vector(&dir.join(&m.maps[i]), &truth.maps[i])?;
        write_scalar(&dir.join(&m.jacobians[i]), &truth.jacobians[i])?;
        write_mask(&dir.join(&m.lung_masks[i]), &truth.lung_masks[i])?;
    }
    write_json(&dir.join(TRUTH_MANIFEST), &m)
}

pub fn read_truth(dir: &Path) -> Result<(GroundTruth, Option<PhantomSpec>)> {
    let path = dir.join(TRUTH_MANIFEST);
    let m: TruthManifest = read_json(&path)?;
    check_version(&path, m.version)?;
    let scalars = |files: &[String]| files.iter().map(|f| read_scalar(&dir.join(f))).collect::<Result<Vec<_>>>();
    let truth = GroundTruth {
        base_hu: read_scalar(&dir.join(&m.base_hu))?,
        displacement: read_vector(&dir.join(&m.displacement))?,
        factors: m.factors,
        maps: m.maps.iter().map(|f| read_vector(&dir.join(f))).collect::<Result<Vec<_>>>()?,
        jacobians: scalars(&m.jacobians)?,
        lung_masks: m.lung_masks.iter().map(|f| read_mask(&dir.join(f))).collect::<Result<Vec<_>>>()?,
        landmarks: m.landmarks.map(PhaseLandmarks::from),
    };
    Ok((truth, m.spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultManifest {
    pub version: u32,
    pub mode: Mode,
    pub driver: Driver,
    pub config: RegressionConfig,
    pub template: String,
    pub fits: Vec<String>,
    pub jacobians: Vec<String>,
    /// Displacements of `phi_{t_i}`.
    pub forward_maps: Vec<String>,
    /// Displacements of `phi_{t_i}^{-1}`.
    pub inverse_maps: Vec<String>,
    pub history: String,
    pub levels: Vec<LevelSummary>,
    pub final_cost: CostRecord,
}

/// Everything `eval` needs from a regression output directory.
#[derive(Debug, Clone)]
pub struct StoredResult {
    pub manifest: ResultManifest,
    pub template: ScalarGrid,
    pub fits: Vec<ScalarGrid>,
    pub jacobians: Vec<ScalarGrid>,
    pub forward_maps: Vec<VectorGrid>,
    pub inverse_maps: Vec<VectorGrid>,
}

pub fn write_result(dir: &Path, result: &RegressionResult, config: &RegressionConfig) -> Result<()> {
    let n = result.fits.len();
    let tg = &result.flow.time_grid;
    let m = ResultManifest {
        version: MANIFEST_VERSION,
        mode: config.mode,
        driver: config.driver,
        config: config.clone(),
        template: "template.vol".into(),
        fits: (0..n).map(|i| indexed("fit", i)).collect(),
        jacobians: (0..n).map(|i| indexed("jacobian", i)).collect(),
        forward_maps: (0..n).map(|i| indexed("forward_map", i)).collect(),
        inverse_maps: (0..n).map(|i| indexed("inverse_map", i)).collect(),
        history: "cost_history.csv".into(),
        levels: result.levels.clone(),
        final_cost: result.final_cost,
    };
    write_scalar(&dir.join(&m.template), &result.template)?;
    for i in 0..n {
        write_scalar(&dir.join(&m.fits[i]), &result.fits[i])?;
        write_scalar(&dir.join(&m.jacobians[i]), &result.jacobians[i])?;
        write_vector(&dir.join(&m.forward_maps[i]), &result.flow.phi[tg.obs_index(i)])?;
        write_vector(&dir.join(&m.inverse_maps[i]), &result.flow.phi_inv[tg.obs_index(i)])?;
    }
    table::write_csv(&dir.join(&m.history), HISTORY_SCHEMA, &result.history)?;
    write_json(&dir.join(RESULT_MANIFEST), &m)
}

pub fn read_result(dir: &Path) -> Result<StoredResult> {
    let path = dir.join(RESULT_MANIFEST);
    let manifest: ResultManifest = read_json(&path)?;
    check_version(&path, manifest.version)?;
    let scalars = |files: &[String]| files.iter().map(|f| read_scalar(&dir.join(f))).collect::<Result<Vec<_>>>();
    let vectors = |files: &[String]| files.iter().map(|f| read_vector(&dir.join(f))).collect::<Result<Vec<_>>>();
    Ok(StoredResult {
        template: read_scalar(&dir.join(&manifest.template))?,
        fits: scalars(&manifest.fits)?,
        jacobians: scalars(&manifest.jacobians)?,
        forward_maps: vectors(&manifest.forward_maps)?,
        inverse_maps: vectors(&manifest.inverse_maps)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Phantom, PhantomSpec};

    #[test]
    fn series_and_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec =
            PhantomSpec { dims: vec![24, 24], spacing_mm: 8.0, phases: 3, landmarks: 4, ..PhantomSpec::default() };
        let p = Phantom::generate(&spec).unwrap();
        write_series(dir.path(), &p.series).unwrap();
        write_truth(dir.path(), &p.truth, Some(&spec)).unwrap();

        let ts = read_series(dir.path()).unwrap();
        assert_eq!(ts.times(), p.series.times());
        assert_eq!(ts.masks(), p.series.masks());
        for (a, b) in ts.images().iter().zip(p.series.images()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1e-3)));
        }
        let (truth, back_spec) = read_truth(dir.path()).unwrap();
        assert_eq!(back_spec, Some(spec));
        assert_eq!(truth.lung_masks, p.truth.lung_masks);
        assert_eq!(truth.factors, p.truth.factors);
        let lm = truth.landmarks.unwrap();
        assert_eq!(lm.points.points, p.truth.landmarks.as_ref().unwrap().points.points);

        let text = fs::read_to_string(dir.path().join(SERIES_MANIFEST)).unwrap();
        assert!(!text.contains(&*dir.path().to_string_lossy()));
    }
}
