//! Evaluation measures: Jacobian error, maximum local variation (MLV),
//! landmark error and masked SSD.

use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::grid::{LandmarkSet, ScalarGrid};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Domain,
    Lung,
    Artifact,
}

/// One row of a metrics table. `phase` is empty for whole-series values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub phase: Option<usize>,
    pub region: Region,
    pub value: f64,
    pub units: String,
}

impl MetricReport {
    pub fn new(
        name: impl Into<String>,
        phase: Option<usize>,
        value: f64,
        region: Region,
        units: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(GdrError::InvalidParameter(format!("metric {name} is not finite")));
        }
        Ok(MetricReport { name, phase, region, value, units: units.into() })
    }
}

fn region_count(region: &ScalarGrid) -> Result<usize> {
    let n = region.values().iter().filter(|&&m| m > 0.5).count();
    if n == 0 {
        return Err(GdrError::InvalidParameter("empty evaluation region".into()));
    }
    Ok(n)
}

/// Mean of `values` over voxels where `region > 0.5`.
pub fn region_mean(values: &ScalarGrid, region: &ScalarGrid) -> Result<f64> {
    values.geometry().ensure_same(region.geometry())?;
    let n = region_count(region)?;
    let (v, m) = (values.values(), region.values());
    Ok(par::sum(v.len(), |l| if m[l] > 0.5 { v[l] } else { 0.0 }) / n as f64)
}

/// Mean `|estimated - truth|` over the region.
pub fn jacobian_error(estimated: &ScalarGrid, truth: &ScalarGrid, region: &ScalarGrid) -> Result<f64> {
    let diff = estimated.zip_map(truth, |a, b| (a - b).abs())?;
    region_mean(&diff, region)
}

/// Per voxel, the largest absolute difference to any of its 8 (2D) or 26
/// (3D) neighbours that lie inside the grid.
pub fn mlv(img: &ScalarGrid) -> ScalarGrid {
    let geom = *img.geometry();
    let d = geom.ndim();
    let dims = geom.dims().to_vec();
    let data = img.values();
    let offsets: Vec<[i64; 3]> = (0..3usize.pow(d as u32))
        .map(|c| {
            let mut o = [0i64; 3];
            let mut r = c;
            for k in 0..d {
                o[k] = (r % 3) as i64 - 1;
                r /= 3;
            }
            o
        })
        .filter(|o| o.iter().any(|&x| x != 0))
        .collect();
    let values = par::collect(geom.len(), |l| {
        let idx = geom.voxel_index(l);
        let centre = data[l];
        let mut best = 0.0f64;
        'next: for o in &offsets {
            let mut q = [0usize; 3];
            for k in 0..d {
                let j = idx[k] as i64 + o[k];
                if j < 0 || j >= dims[k] as i64 {
                    continue 'next;
                }
                q[k] = j as usize;
            }
            best = best.max((centre - data[geom.linear_index(&q[..d])]).abs());
        }
        best
    });
    ScalarGrid::new(geom, values).expect("length matches geometry")
}

/// Mean MLV over the region.
pub fn mean_mlv(img: &ScalarGrid, region: &ScalarGrid) -> Result<f64> {
    region_mean(&mlv(img), region)
}

/// Mean Euclidean distance between paired points.
pub fn mean_landmark_error(a: &LandmarkSet, b: &LandmarkSet) -> Result<f64> {
    a.check_paired_with(b)?;
    if a.is_empty() {
        return Err(GdrError::InvalidParameter("no landmarks".into()));
    }
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

/// `sum ((a - b) mask)^2` times the voxel volume.
pub fn masked_ssd(a: &ScalarGrid, b: &ScalarGrid, mask: &ScalarGrid) -> Result<f64> {
    a.geometry().ensure_same(b.geometry())?;
    a.geometry().ensure_same(mask.geometry())?;
    let (x, y, m) = (a.values(), b.values(), mask.values());
    Ok(par::sum(x.len(), |l| ((x[l] - y[l]) * m[l]).powi(2)) * a.geometry().voxel_volume())
}
