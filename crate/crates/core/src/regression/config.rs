use serde::{Deserialize, Serialize};

use crate::density::Action;
use crate::error::{GdrError, Result};

/// Which regression model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Density action, masked cost, density template.
    Gdr,
    /// Intensity action, unmasked cost, Jacobian-weighted template.
    Gir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Driver {
    /// Flow of transformations: states and costates by composition.
    Fot,
    /// Flow of images: states and costates by Euler stepping.
    Foi,
}

/// How the cost gradient is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientScheme {
    /// Exact derivative of the discretised cost (reverse mode through the
    /// map integration and interpolation).
    #[default]
    Discrete,
    /// Continuous optimality system: costate trajectory and
    /// `w + I grad(lambda)` (density) or `w - lambda grad(I)` (intensity).
    Costate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateRule {
    Density,
    JacobianWeighted,
}

/// The pieces a [`Mode`] fixes, kept separate so they can be mixed in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formulation {
    pub action: Action,
    pub template: TemplateRule,
    pub use_masks: bool,
}

impl Mode {
    pub fn formulation(self) -> Formulation {
        match self {
            Mode::Gdr => Formulation { action: Action::Density, template: TemplateRule::Density, use_masks: true },
            Mode::Gir => {
                Formulation { action: Action::Intensity, template: TemplateRule::JacobianWeighted, use_masks: false }
            }
        }
    }
}

/// One resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    /// Kernel width in millimetres.
    pub sigma_mm: f64,
    /// Downsampling factor relative to the input grid.
    pub factor: usize,
    pub gamma: f64,
}

fn default_k() -> usize {
    10
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_m() -> usize {
    3
}
fn default_max_iters() -> usize {
    200
}
fn default_warmup() -> usize {
    3
}
fn default_driver() -> Driver {
    Driver::Fot
}
fn default_template_iterations() -> usize {
    super::objective::DEFAULT_TEMPLATE_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub mode: Mode,
    #[serde(default = "default_driver")]
    pub driver: Driver,
    #[serde(default)]
    pub gradient: GradientScheme,
    /// Coarse to fine.
    pub levels: Vec<Level>,
    /// Computational steps per observation interval.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Conjugate-gradient steps refining the closed-form density template
    /// (0 keeps the closed form). Ignored by the Jacobian-weighted rule.
    #[serde(default = "default_template_iterations")]
    pub template_iterations: usize,
}

/// Named schedules. `desk-2d` is a single 20 mm level with `gamma = 0.005`
/// and `k = 4`, sized for the default 48x48 phantom at 5 mm spacing.
pub const PRESETS: [&str; 3] = ["paper-2d", "paper-3d", "desk-2d"];

impl RegressionConfig {
    pub fn preset(name: &str) -> Result<Self> {
        if name == "desk-2d" {
            return Ok(Self::single(Mode::Gdr, 20.0, 0.005, 4));
        }
        let (sigmas, gammas, k) = match name {
            "paper-2d" => ([60.0, 30.0, 15.0], [0.1, 0.1, 0.1], 10),
            "paper-3d" => ([48.0, 24.0, 12.0], [0.05, 0.075, 0.1], 5),
            other => return Err(GdrError::Config(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
        };
        let levels = sigmas
            .iter()
            .zip(gammas)
            .zip([4, 2, 1])
            .map(|((&sigma_mm, gamma), factor)| Level { sigma_mm, factor, gamma })
            .collect();
        Ok(RegressionConfig {
            mode: Mode::Gdr,
            driver: Driver::Fot,
            gradient: GradientScheme::Discrete,
            levels,
            k,
            epsilon: default_epsilon(),
            m: default_m(),
            max_iters: default_max_iters(),
            warmup: default_warmup(),
            template_iterations: default_template_iterations(),
        })
    }

    /// Single-level configuration.
    pub fn single(mode: Mode, sigma_mm: f64, gamma: f64, k: usize) -> Self {
        RegressionConfig {
            mode,
            driver: Driver::Fot,
            gradient: GradientScheme::Discrete,
            levels: vec![Level { sigma_mm, factor: 1, gamma }],
            k,
            epsilon: default_epsilon(),
            m: default_m(),
            max_iters: default_max_iters(),
            warmup: default_warmup(),
            template_iterations: default_template_iterations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdrError::Config(msg));
        if self.levels.is_empty() {
            return bad("at least one level is required".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.sigma_mm > 0.0 && l.sigma_mm.is_finite()) {
                return bad(format!("level {i}: sigma_mm must be positive"));
            }
            if !(l.gamma > 0.0 && l.gamma.is_finite()) {
                return bad(format!("level {i}: gamma must be positive"));
            }
            if l.factor == 0 {
                return bad(format!("level {i}: factor must be at least 1"));
            }
        }
        if self.levels.windows(2).any(|w| w[1].factor > w[0].factor) {
            return bad("levels must be ordered coarse to fine".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_presets_have_expected_levels() {
        let p = RegressionConfig::preset("paper-2d").unwrap();
        let got: Vec<_> = p.levels.iter().map(|l| (l.sigma_mm, l.factor, l.gamma)).collect();
        assert_eq!(got, vec![(60.0, 4, 0.1), (30.0, 2, 0.1), (15.0, 1, 0.1)]);
        let p = RegressionConfig::preset("paper-3d").unwrap();
        let got: Vec<_> = p.levels.iter().map(|l| (l.sigma_mm, l.factor, l.gamma)).collect();
        assert_eq!(got, vec![(48.0, 4, 0.05), (24.0, 2, 0.075), (12.0, 1, 0.1)]);
        assert_eq!(p.m, 3);
        assert_eq!(p.epsilon, 1e-4);
        assert!(RegressionConfig::preset("paper-4d").is_err());
        let d = RegressionConfig::preset("desk-2d").unwrap();
        assert_eq!((d.levels.len(), d.k, d.levels[0].gamma), (1, 4, 0.005));
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let p = RegressionConfig::preset("paper-3d").unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: RegressionConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);

        let minimal: RegressionConfig =
            serde_json::from_str(r#"{"mode":"gir","levels":[{"sigma_mm":8,"factor":1,"gamma":0.2}]}"#).unwrap();
        assert_eq!(minimal.driver, Driver::Fot);
        assert_eq!(minimal.gradient, GradientScheme::Discrete);
        assert_eq!((minimal.k, minimal.m, minimal.warmup, minimal.max_iters), (10, 3, 3, 200));
        assert!(serde_json::from_str::<RegressionConfig>(r#"{"mode":"gdr","levels":[],"sigma":1}"#).is_err());
    }

    #[test]
    fn validation() {
        let mut c = RegressionConfig::preset("paper-2d").unwrap();
        assert!(c.validate().is_ok());
        c.levels.reverse();
        assert!(c.validate().is_err());
        let mut c = RegressionConfig::single(Mode::Gdr, 10.0, 0.0, 4);
        assert!(c.validate().is_err());
        c.levels[0].gamma = 0.1;
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let c = RegressionConfig { levels: vec![], ..RegressionConfig::single(Mode::Gdr, 10.0, 0.1, 4) };
        assert!(c.validate().is_err());
    }
}
