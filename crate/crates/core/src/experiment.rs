//! Experiment plumbing shared by the command line tool, the examples and
//! the acceptance tests: configuration files, evaluation against ground
//! truth, and the dropout and duplication protocols.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::grid::ScalarGrid;
use crate::io::StoredResult;
use crate::metrics::{self, MetricReport, Region};
use crate::phantom::{self, GroundTruth, Phantom};
use crate::regression::{run_multiresolution, Driver, Mode, RegressionConfig, RegressionResult, TimeSeries};

/// Preset used when neither a preset nor an explicit schedule is given.
pub const DEFAULT_PRESET: &str = "desk-2d";

/// A regression run as stored in a JSON file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub regression: Option<RegressionConfig>,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub driver: Option<Driver>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = crate::io::dataset::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.input, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The regression schedule with mode and driver overrides applied.
    pub fn regression_config(&self) -> Result<RegressionConfig> {
        let mut cfg = match (&self.preset, &self.regression) {
            (Some(_), Some(_)) => return Err(GdrError::Config("give either a preset or a regression schedule".into())),
            (Some(name), None) => RegressionConfig::preset(name)?,
            (None, Some(r)) => r.clone(),
            (None, None) => RegressionConfig::preset(DEFAULT_PRESET)?,
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(driver) = self.driver {
            cfg.driver = driver;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean over phases `1..n` of the lung-region Jacobian error.
pub fn mean_lung_jacobian_error(jacobians: &[ScalarGrid], truth: &GroundTruth) -> Result<f64> {
    let n = jacobians.len();
    if n != truth.jacobians.len() || n < 2 {
        return Err(GdrError::InvalidParameter(format!("{n} Jacobians for {} true phases", truth.jacobians.len())));
    }
    let mut total = 0.0;
    for i in 1..n {
        total += metrics::jacobian_error(&jacobians[i], &truth.jacobians[i], &truth.lung_masks[i])?;
    }
    Ok(total / (n - 1) as f64)
}

/// Region where a mask excludes data (mask below one half).
pub fn excluded_region(mask: &ScalarGrid) -> ScalarGrid {
    mask.map(|m| if m < 0.5 { 1.0 } else { 0.0 })
}

/// Metrics of a stored result against ground truth. With `series`, the fits
/// are also compared to the observations and any masked voxels form an
/// artifact region.
pub fn evaluate(truth: &GroundTruth, series: Option<&TimeSeries>, result: &StoredResult) -> Result<Vec<MetricReport>> {
    let n = truth.jacobians.len();
    if result.jacobians.len() != n {
        return Err(GdrError::InvalidParameter(format!("result has {} phases, truth {n}", result.jacobians.len())));
    }
    let mut rows = Vec::new();
    for i in 1..n {
        let e = metrics::jacobian_error(&result.jacobians[i], &truth.jacobians[i], &truth.lung_masks[i])?;
        rows.push(MetricReport::new("jacobian_error", Some(i), e, Region::Lung, "1")?);
    }
    let mean = mean_lung_jacobian_error(&result.jacobians, truth)?;
    rows.push(MetricReport::new("jacobian_error", None, mean, Region::Lung, "1")?);
    let mlv = metrics::mean_mlv(&result.template, &truth.lung_masks[0])?;
    rows.push(MetricReport::new("mlv", None, mlv, Region::Lung, "density")?);

    if let Some(lm) = &truth.landmarks {
        let map = result
            .inverse_maps
            .get(lm.phase)
            .ok_or_else(|| GdrError::InvalidParameter(format!("landmark phase {} missing", lm.phase)))?;
        let pre = metrics::mean_landmark_error(&lm.points, &lm.truth)?;
        let post = metrics::mean_landmark_error(&phantom::propagate_landmarks(&lm.points, map), &lm.truth)?;
        rows.push(MetricReport::new("mle_pre", Some(lm.phase), pre, Region::Lung, "mm")?);
        rows.push(MetricReport::new("mle_post", Some(lm.phase), post, Region::Lung, "mm")?);
    }

    if let Some(ts) = series {
        if ts.len() != n {
            return Err(GdrError::InvalidParameter(format!("series has {} phases, truth {n}", ts.len())));
        }
        for i in 0..n {
            let ssd = metrics::masked_ssd(&result.fits[i], &ts.images()[i], &ts.masks()[i])?;
            rows.push(MetricReport::new("masked_ssd", Some(i), ssd, Region::Domain, "density^2 mm^d")?);
            let artifact = excluded_region(&ts.masks()[i]);
            if i > 0 && artifact.values().iter().any(|&a| a > 0.5) {
                let e = metrics::jacobian_error(&result.jacobians[i], &truth.jacobians[i], &artifact)?;
                rows.push(MetricReport::new("jacobian_error", Some(i), e, Region::Artifact, "1")?);
            }
        }
    }
    Ok(rows)
}

/// A duplication artifact in one phase, with its mask installed in the
/// series.
#[derive(Debug, Clone)]
pub struct DuplicationCase {
    pub series: TimeSeries,
    pub phase: usize,
    /// Zero on the corrupted slab.
    pub mask: ScalarGrid,
}

impl DuplicationCase {
    /// Duplicates a slab of `thickness_mm` straddling the diaphragm of
    /// `phase`.
    pub fn new(phantom: &Phantom, phase: usize, thickness_mm: f64) -> Result<Self> {
        let start = phantom.duplication_start_mm(phase, thickness_mm);
        let (series, mask) = phantom::inject_duplication(&phantom.series, phase, thickness_mm, start)?;
        let series = Self::install(&series, phase, &mask)?;
        Ok(DuplicationCase { series, phase, mask })
    }

    fn install(series: &TimeSeries, phase: usize, mask: &ScalarGrid) -> Result<TimeSeries> {
        let mut masks = series.masks().to_vec();
        masks[phase] = masks[phase].zip_map(mask, f64::min)?;
        series.with_masks(masks)
    }

    /// Same corruption with the mask grown by `rows` on each side.
    pub fn dilated(&self, rows: usize) -> Result<Self> {
        let mask = phantom::dilate_slab_mask(&self.mask, rows);
        let series = Self::install(&self.series, self.phase, &mask)?;
        Ok(DuplicationCase { series, phase: self.phase, mask })
    }

    /// Mean Jacobian error over the corrupted slab.
    pub fn artifact_error(&self, result: &RegressionResult, truth: &GroundTruth) -> Result<f64> {
        let region = excluded_region(&self.mask);
        metrics::jacobian_error(&result.jacobians[self.phase], &truth.jacobians[self.phase], &region)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Dropout fractions in `[0, 0.5]`.
    pub levels: Vec<f64>,
    pub repeats: usize,
    pub slab_mm: f64,
    pub seed: u64,
    pub modes: Vec<Mode>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            levels: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            repeats: 3,
            slab_mm: 12.0,
            seed: 0,
            modes: vec![Mode::Gdr, Mode::Gir],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub dropout_percent: f64,
    pub repeat: usize,
    pub seed: u64,
    pub masked_fraction: f64,
    pub jacobian_error: f64,
    pub iterations: usize,
}

/// Dropout protocol: for every level and repeat, dropped slabs are replaced
/// by the same voxels of the farthest phase and marked in the masks; each
/// mode is then regressed and scored on the lung Jacobians. Repeats of a
/// zero level are identical and computed once.
pub fn dropout_sweep(
    series: &TimeSeries,
    truth: &GroundTruth,
    base: &RegressionConfig,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if opts.repeats == 0 || opts.levels.is_empty() || opts.modes.is_empty() {
        return Err(GdrError::InvalidParameter("sweep needs levels, modes and at least one repeat".into()));
    }
    let mut rows = Vec::new();
    for &level in &opts.levels {
        for repeat in 0..opts.repeats {
            let seed = opts.seed.wrapping_add(repeat as u64);
            let masks = phantom::make_dropout_masks(series, level, opts.slab_mm, seed)?;
            let masked = masks.iter().map(|m| m.values().iter().filter(|&&x| x < 0.5).count()).sum::<usize>() as f64
                / (masks.len() * series.geometry().len()) as f64;
            let corrupted = phantom::apply_dropout(series, masks)?;
            for &mode in &opts.modes {
                let reuse = if level == 0.0 && repeat > 0 {
                    rows.iter().rev().find(|r: &&SweepRow| r.mode == mode && r.dropout_percent == 0.0).cloned()
                } else {
                    None
                };
                let row = match reuse {
                    Some(r) => SweepRow { repeat, seed, ..r },
                    None => {
                        let cfg = RegressionConfig { mode, ..base.clone() };
                        let result = run_multiresolution(&corrupted, &cfg)?;
                        SweepRow {
                            mode,
                            dropout_percent: level * 100.0,
                            repeat,
                            seed,
                            masked_fraction: masked,
                            jacobian_error: mean_lung_jacobian_error(&result.jacobians, truth)?,
                            iterations: result.levels.iter().map(|l| l.iterations).sum(),
                        }
                    }
                };
                log::info!("dropout {:.0}% repeat {repeat} {mode:?}: error {:.4}", level * 100.0, row.jacobian_error);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean error per (mode, level), in the order first seen.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(Mode, f64, f64)> {
    let mut keys: Vec<(Mode, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.mode, r.dropout_percent)) {
            keys.push((r.mode, r.dropout_percent));
        }
    }
    keys.into_iter()
        .map(|(mode, level)| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.mode == mode && r.dropout_percent == level)
                .map(|r| r.jacobian_error)
                .collect();
            (mode, level, errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_resolution() {
        let c = ExperimentConfig::default();
        assert_eq!(c.regression_config().unwrap(), RegressionConfig::preset(DEFAULT_PRESET).unwrap());
        let c = ExperimentConfig { preset: Some("paper-2d".into()), mode: Some(Mode::Gir), ..Default::default() };
        let r = c.regression_config().unwrap();
        assert_eq!((r.mode, r.levels.len()), (Mode::Gir, 3));
        let both = ExperimentConfig {
            preset: Some("paper-2d".into()),
            regression: Some(RegressionConfig::preset("paper-3d").unwrap()),
            ..Default::default()
        };
        assert!(both.regression_config().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"preset":"desk-2d","gamma":1}"#).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"preset":"desk-2d","input":"data","output":"/abs/out"}"#).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.input.unwrap(), dir.path().join("data"));
        assert_eq!(c.output.unwrap(), PathBuf::from("/abs/out"));
    }

    #[test]
    fn sweep_means_group_rows() {
        let row = |mode, level, e| SweepRow {
            mode,
            dropout_percent: level,
            repeat: 0,
            seed: 0,
            masked_fraction: 0.0,
            jacobian_error: e,
            iterations: 1,
        };
        let rows = vec![row(Mode::Gdr, 10.0, 1.0), row(Mode::Gir, 10.0, 4.0), row(Mode::Gdr, 10.0, 3.0)];
        assert_eq!(sweep_means(&rows), vec![(Mode::Gdr, 10.0, 2.0), (Mode::Gir, 10.0, 4.0)]);
    }
}
