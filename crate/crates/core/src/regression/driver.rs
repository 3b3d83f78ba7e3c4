use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::FlowState;
use crate::grid::{self, GridGeometry, ScalarGrid, VectorGrid};
use crate::kernel::GaussianKernel;
use crate::optimize::{self, Evaluation, LbfgsHistory, LineSearch, Vector, WolfeParams};

use super::objective::{Assessment, Momentum, Problem};
use super::{Driver, Formulation, Level, RegressionConfig, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative cost reduction fell below epsilon.
    Converged,
    ZeroGradient,
    MaxIterations,
    LineSearchExhausted,
}

/// Cost after an iteration (iteration 0 is the initial state of a level).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub level: usize,
    pub iteration: usize,
    pub metric: f64,
    pub data: f64,
    pub total: f64,
    /// Accepted step length (0 for the initial record).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub dims: Vec<usize>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub initial_total: f64,
    pub final_total: f64,
    /// Worst `|phi o phi^{-1} - id|` over time, in voxels.
    pub inverse_consistency: f64,
}

#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub template: ScalarGrid,
    pub flow: FlowState,
    /// `|D phi_{t_i}^{-1}|` for every observation.
    pub jacobians: Vec<ScalarGrid>,
    /// `phi_{t_i} . I_T` for every observation.
    pub fits: Vec<ScalarGrid>,
    pub history: Vec<CostRecord>,
    pub levels: Vec<LevelSummary>,
    pub final_cost: CostRecord,
}

impl RegressionResult {
    pub fn geometry(&self) -> &GridGeometry {
        self.template.geometry()
    }

    /// Displacement of `phi_{t_i}` for observation `i`.
    pub fn forward_map(&self, i: usize) -> &VectorGrid {
        &self.flow.phi[self.flow.time_grid.obs_index(i)]
    }
}

struct Iterate {
    w: Momentum,
    flow: FlowState,
    assessment: Assessment,
    grad: Momentum,
    template: ScalarGrid,
}

/// Optimises one level; `init` is the raw momentum to start from.
pub fn run_level(
    ts: &TimeSeries,
    cfg: &RegressionConfig,
    formulation: Formulation,
    driver: Driver,
    level: &Level,
    level_index: usize,
    init: Option<Vec<VectorGrid>>,
    history: &mut Vec<CostRecord>,
) -> Result<(RegressionResult, LevelSummary)> {
    let kernel = GaussianKernel::new(level.sigma_mm)?;
    let problem = Problem::new(ts, cfg.k, kernel, level.gamma, formulation, driver)?
        .with_scheme(cfg.gradient)
        .with_template_iterations(cfg.template_iterations);
    let w = match init {
        Some(raw) => problem.momentum(raw),
        None => problem.zero_momentum(),
    };
    let flow = problem.flow(&w)?;
    let template = if init_is_zero(&w) { ts.images()[0].clone() } else { problem.template(&flow)? };
    let assessment = problem.assess(&flow, &template)?;
    let grad = problem.gradient(&flow, &assessment)?;
    let mut it = Iterate { w, flow, assessment, grad, template };
    let initial_total = it.assessment.total;
    let record = |iteration: usize, a: &Assessment, step: f64| CostRecord {
        level: level_index,
        iteration,
        metric: a.metric,
        data: a.data,
        total: a.total,
        step,
    };
    history.push(record(0, &it.assessment, 0.0));
    log::info!(
        "level {level_index} ({:?}, sigma {} mm, gamma {}): initial cost {:.6e}",
        ts.geometry().dims(),
        level.sigma_mm,
        level.gamma,
        initial_total
    );

    let wolfe = WolfeParams::default();
    let mut lbfgs = LbfgsHistory::new(cfg.m);
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < cfg.max_iters {
        if it.grad.dot(&it.grad) == 0.0 {
            termination = Termination::ZeroGradient;
            break;
        }
        let mut z =
            if iterations < cfg.warmup { it.grad.scaled(-1.0) } else { optimize::lbfgs_direction(&lbfgs, &it.grad) };
        if !(z.dot(&it.grad) < 0.0) {
            log::debug!("L-BFGS direction is not a descent direction; restarting from steepest descent");
            lbfgs.clear();
            z = it.grad.scaled(-1.0);
        }
        let template = &it.template;
        let search = optimize::wolfe_line_search(
            |x: &Momentum| {
                evaluations += 1;
                let (flow, assessment, grad) = problem.evaluate(x, template)?;
                Ok(Evaluation { cost: assessment.total, grad, payload: (flow, assessment) })
            },
            &it.w,
            it.assessment.total,
            &it.grad,
            &z,
            &wolfe,
        )?;
        let (step, exhausted) = match search {
            LineSearch::Accepted(step) => (step, false),
            LineSearch::Exhausted(Some(best)) => {
                log::warn!("level {level_index}: line search exhausted; keeping best decreasing trial");
                (best, true)
            }
            LineSearch::Exhausted(None) => {
                log::warn!("level {level_index}: line search exhausted without decrease");
                termination = Termination::LineSearchExhausted;
                break;
            }
        };
        iterations += 1;
        let previous = it.assessment.total;
        lbfgs.push(step.x.minus(&it.w), step.eval.grad.minus(&it.grad));
        let (flow, ls_assessment) = step.eval.payload;
        let ls_grad = step.eval.grad;

        // template update; kept only if it does not raise the cost
        let candidate = problem.template(&flow)?;
        let assessment = problem.assess(&flow, &candidate)?;
        it = if assessment.total <= ls_assessment.total {
            let grad = problem.gradient(&flow, &assessment)?;
            Iterate { w: step.x, flow, assessment, grad, template: candidate }
        } else {
            log::debug!("template update would raise the cost; keeping previous template");
            Iterate { w: step.x, flow, assessment: ls_assessment, grad: ls_grad, template: it.template }
        };
        history.push(record(iterations, &it.assessment, step.s));
        log::debug!(
            "level {level_index} iter {iterations}: total {:.6e} (metric {:.3e}, data {:.3e}), step {}",
            it.assessment.total,
            it.assessment.metric,
            it.assessment.data,
            step.s
        );
        if exhausted {
            termination = Termination::LineSearchExhausted;
            break;
        }
        let reduction = (previous - it.assessment.total) / previous.max(1e-30);
        if reduction < cfg.epsilon {
            termination = Termination::Converged;
            break;
        }
    }
    let inverse_consistency = it.flow.inverse_consistency().into_iter().fold(0.0, f64::max);
    log::info!(
        "level {level_index}: {iterations} iterations, {evaluations} evaluations, final cost {:.6e} ({termination:?})",
        it.assessment.total
    );
    let summary = LevelSummary {
        level: level_index,
        dims: ts.geometry().dims().to_vec(),
        iterations,
        evaluations,
        termination,
        initial_total,
        final_total: it.assessment.total,
        inverse_consistency,
    };
    let tg = &it.flow.time_grid;
    let jacobians = (0..ts.len()).map(|i| it.flow.jac_inv[tg.obs_index(i)].clone()).collect();
    let fits = (0..ts.len()).map(|i| it.assessment.states[tg.obs_index(i)].clone()).collect();
    let final_cost = *history.last().expect("history has the initial record");
    let result = RegressionResult {
        template: it.template,
        flow: it.flow,
        jacobians,
        fits,
        history: Vec::new(),
        levels: vec![summary.clone()],
        final_cost,
    };
    Ok((result, summary))
}

fn init_is_zero(w: &Momentum) -> bool {
    w.raw.iter().all(VectorGrid::is_zero)
}

fn single(ts: &TimeSeries, cfg: &RegressionConfig, driver: Driver, level: &Level) -> Result<RegressionResult> {
    cfg.validate()?;
    let mut history = Vec::new();
    let (mut result, _) = run_level(ts, cfg, cfg.mode.formulation(), driver, level, 0, None, &mut history)?;
    result.history = history;
    Ok(result)
}

/// Single level, flow-of-transformations driver, on `ts` as given.
pub fn run_fot(ts: &TimeSeries, cfg: &RegressionConfig, level: &Level) -> Result<RegressionResult> {
    single(ts, cfg, Driver::Fot, level)
}

/// Single level, flow-of-images driver, on `ts` as given.
pub fn run_foi(ts: &TimeSeries, cfg: &RegressionConfig, level: &Level) -> Result<RegressionResult> {
    single(ts, cfg, Driver::Foi, level)
}

/// Runs all configured levels coarse to fine. Each level starts from the
/// previous level's velocities resampled onto its grid, used as momenta.
pub fn run_multiresolution(ts: &TimeSeries, cfg: &RegressionConfig) -> Result<RegressionResult> {
    cfg.validate()?;
    let mut history = Vec::new();
    let mut summaries = Vec::new();
    let mut init: Option<Vec<VectorGrid>> = None;
    let mut last = None;
    for (index, level) in cfg.levels.iter().enumerate() {
        let level_ts = ts.downsampled(level.factor)?;
        let geom = *level_ts.geometry();
        let start = init
            .take()
            .map(|v: Vec<VectorGrid>| v.iter().map(|f| grid::upsample_field(f, &geom)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let (result, summary) =
            run_level(&level_ts, cfg, cfg.mode.formulation(), cfg.driver, level, index, start, &mut history)?;
        summaries.push(summary);
        init = Some(result.flow.v.clone());
        last = Some(result);
    }
    let mut result = last.expect("at least one level");
    result.history = history;
    result.levels = summaries;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::Mode;

    fn blob(g: GridGeometry, cx: f64, s: f64) -> ScalarGrid {
        ScalarGrid::from_fn(g, move |p| {
            0.1 + 0.9 * (-((p[0] - cx).powi(2) + (p[1] - 16.0).powi(2)) / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn identical_observations_stay_at_zero() {
        let g = GridGeometry::isotropic(&[24, 24], 1.0).unwrap();
        let a = blob(g, 12.0, 3.0);
        let ts = TimeSeries::unmasked(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        let cfg = RegressionConfig::single(Mode::Gdr, 4.0, 0.1, 3);
        for driver in [Driver::Fot, Driver::Foi] {
            let r = single(&ts, &cfg, driver, &cfg.levels[0]).unwrap();
            assert!(r.final_cost.total < 1e-8);
            assert_eq!(r.levels[0].termination, Termination::ZeroGradient);
            assert_eq!(r.template, a);
        }
    }

    #[test]
    fn cost_history_is_monotone() {
        let g = GridGeometry::isotropic(&[32, 32], 1.0).unwrap();
        let ts = TimeSeries::unmasked(vec![blob(g, 14.0, 4.0), blob(g, 16.0, 4.5), blob(g, 18.0, 5.0)]).unwrap();
        let mut cfg = RegressionConfig::single(Mode::Gdr, 4.0, 0.2, 3);
        cfg.max_iters = 15;
        let r = run_fot(&ts, &cfg, &cfg.levels[0]).unwrap();
        assert!(r.history.len() > 2);
        for w in r.history.windows(2) {
            assert!(w[1].total <= w[0].total, "{:?}", r.history);
        }
        assert!(r.final_cost.total < 0.5 * r.history[0].total);
    }
}
