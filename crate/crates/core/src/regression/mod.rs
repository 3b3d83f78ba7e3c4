//! Geodesic regression of an image time series: objective, adjoint
//! gradient, closed-form template and the optimisation drivers.

mod config;
mod driver;
mod objective;

pub use config::{Driver, Formulation, GradientScheme, Level, Mode, RegressionConfig, TemplateRule, PRESETS};
pub use driver::{
    run_foi, run_fot, run_level, run_multiresolution, CostRecord, LevelSummary, RegressionResult, Termination,
};
pub use objective::{
    data_term, update_template, update_template_gdr, update_template_gir, velocity_gradient, Assessment, Momentum,
    Problem,
};

use crate::error::{GdrError, Result};
use crate::grid::{self, GridGeometry, ScalarGrid};

/// Lowest density accepted in an observation.
pub const DENSITY_FLOOR: f64 = -0.05;

/// Observed images with their artifact masks and acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    images: Vec<ScalarGrid>,
    masks: Vec<ScalarGrid>,
    times: Vec<f64>,
}

impl TimeSeries {
    pub fn new(images: Vec<ScalarGrid>, masks: Vec<ScalarGrid>, times: Vec<f64>) -> Result<Self> {
        let n = images.len();
        if n < 2 {
            return Err(GdrError::InvalidParameter(format!("{n} observations (need at least 2)")));
        }
        if masks.len() != n || times.len() != n {
            return Err(GdrError::InvalidParameter(format!(
                "{n} images, {} masks, {} times",
                masks.len(),
                times.len()
            )));
        }
        let geom = *images[0].geometry();
        for (img, mask) in images.iter().zip(&masks) {
            geom.ensure_same(img.geometry())?;
            geom.ensure_same(mask.geometry())?;
            img.check_finite()?;
            if let Some((index, &value)) = img.values().iter().enumerate().find(|(_, &x)| x < DENSITY_FLOOR) {
                return Err(GdrError::OutOfRange { index, value, min: DENSITY_FLOOR, max: f64::INFINITY });
            }
            if let Some((index, &value)) = mask.values().iter().enumerate().find(|(_, &x)| !(0.0..=1.0).contains(&x)) {
                return Err(GdrError::OutOfRange { index, value, min: 0.0, max: 1.0 });
            }
        }
        if times[0] != 0.0 || times[n - 1] != 1.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GdrError::InvalidParameter("times must increase strictly from 0 to 1".into()));
        }
        Ok(TimeSeries { images, masks, times })
    }

    /// Unit masks and uniformly spaced times.
    pub fn unmasked(images: Vec<ScalarGrid>) -> Result<Self> {
        let n = images.len();
        let masks = images.iter().map(|i| ScalarGrid::filled(*i.geometry(), 1.0)).collect();
        let times = (0..n).map(|i| i as f64 / (n.max(2) - 1) as f64).collect();
        Self::new(images, masks, times)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.images[0].geometry()
    }

    pub fn images(&self) -> &[ScalarGrid] {
        &self.images
    }

    pub fn masks(&self) -> &[ScalarGrid] {
        &self.masks
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn with_masks(&self, masks: Vec<ScalarGrid>) -> Result<Self> {
        Self::new(self.images.clone(), masks, self.times.clone())
    }

    /// Same images with every mask set to one.
    pub fn without_masks(&self) -> Self {
        let masks = self.images.iter().map(|i| ScalarGrid::filled(*i.geometry(), 1.0)).collect();
        TimeSeries { images: self.images.clone(), masks, times: self.times.clone() }
    }

    /// Smoothed and subsampled copy; masks become soft.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let images = self.images.iter().map(|i| grid::downsample_scalar(i, factor)).collect::<Result<Vec<_>>>()?;
        let masks = self
            .masks
            .iter()
            .map(|m| grid::downsample_scalar(m, factor).map(|d| d.map(|x| x.clamp(0.0, 1.0))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeSeries { images, masks, times: self.times.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let g = GridGeometry::isotropic(&[4, 4], 1.0).unwrap();
        let img = ScalarGrid::filled(g, 0.5);
        let one = ScalarGrid::filled(g, 1.0);
        assert!(TimeSeries::new(vec![img.clone()], vec![one.clone()], vec![0.0]).is_err());
        assert!(TimeSeries::new(vec![img.clone(); 2], vec![one.clone(); 2], vec![0.0, 1.0]).is_ok());
        assert!(TimeSeries::new(vec![img.clone(); 2], vec![one.clone(); 2], vec![0.0, 0.9]).is_err());
        assert!(TimeSeries::new(vec![img.clone(); 3], vec![one.clone(); 3], vec![0.0, 0.0, 1.0]).is_err());
        let bad_mask = ScalarGrid::filled(g, 1.5);
        assert!(TimeSeries::new(vec![img.clone(); 2], vec![one.clone(), bad_mask], vec![0.0, 1.0]).is_err());
        let neg = ScalarGrid::filled(g, -0.2);
        assert!(TimeSeries::new(vec![img.clone(), neg], vec![one.clone(); 2], vec![0.0, 1.0]).is_err());
        let other = ScalarGrid::filled(GridGeometry::isotropic(&[4, 5], 1.0).unwrap(), 0.5);
        assert!(TimeSeries::new(vec![img, other], vec![one.clone(); 2], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn downsampling_keeps_masks_in_unit_interval() {
        let g = GridGeometry::isotropic(&[17, 17], 1.0).unwrap();
        let img = ScalarGrid::from_fn(g, |p| 0.5 + 0.01 * p[0]);
        let mask = ScalarGrid::from_fn(g, |p| if p[1] > 8.0 { 0.0 } else { 1.0 });
        let ts = TimeSeries::new(vec![img.clone(), img], vec![mask.clone(), mask], vec![0.0, 1.0]).unwrap();
        let d = ts.downsampled(2).unwrap();
        assert_eq!(d.geometry().dims(), &[9, 9]);
        for m in d.masks() {
            assert!(m.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
