use std::sync::Arc;

use crate::adjoint;
use crate::density::{self, Action, CostateTrajectory, ObservationTerms};
use crate::error::{GdrError, Result};
use crate::flow::{FlowState, TimeGrid};
use crate::grid::{self, ScalarGrid, VectorGrid};
use crate::kernel::{self, GaussianKernel, MomentumField};
use crate::optimize::Vector;
use crate::par;

use super::{Driver, Formulation, GradientScheme, TemplateRule, TimeSeries};

/// Denominators below this give a zero template voxel.
pub const TEMPLATE_MIN_WEIGHT: f64 = 1e-12;
/// Relative residual at which template refinement stops.
pub const TEMPLATE_CG_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_TEMPLATE_ITERATIONS: usize = 30;

/// Momentum stack together with its smoothed copy `K*w`.
///
/// The inner product is `sum_t dt_t <a_t, K*b_t>`, the metric in which the
/// raw adjoint gradient is the gradient of the cost with respect to `w`.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub raw: Vec<VectorGrid>,
    pub smooth: Vec<VectorGrid>,
    weights: Arc<[f64]>,
}

impl Momentum {
    pub fn new(raw: Vec<VectorGrid>, kernel: &GaussianKernel, weights: Arc<[f64]>) -> Self {
        let smooth = raw.iter().map(|w| kernel::smooth_vector(w, kernel)).collect();
        Momentum { raw, smooth, weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_field(&self) -> MomentumField {
        MomentumField { w: self.raw.clone() }
    }
}

impl Vector for Momentum {
    fn dot(&self, other: &Self) -> f64 {
        self.raw
            .iter()
            .zip(&other.smooth)
            .zip(self.weights.iter())
            .map(|((a, b), dt)| dt * kernel::l2_unchecked(a, b))
            .sum()
    }

    fn axpy(&mut self, alpha: f64, x: &Self) {
        for (a, b) in self.raw.iter_mut().zip(&x.raw).chain(self.smooth.iter_mut().zip(&x.smooth)) {
            for k in 0..a.ndim() {
                let (dst, src) = (a.component_mut(k), b.component(k));
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += alpha * s;
                }
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for a in self.raw.iter_mut().chain(self.smooth.iter_mut()) {
            a.scale(alpha);
        }
    }
}

/// States and cost of one iterate.
#[derive(Debug, Clone)]
pub struct Assessment {
    pub states: Vec<ScalarGrid>,
    pub metric: f64,
    pub data: f64,
    pub total: f64,
}

/// `(1/gamma^2) sum_i || (fit_i - obs_i) M_i ||^2`, integrated over the grid.
pub fn data_term(fits: &[ScalarGrid], observations: &[ScalarGrid], masks: &[ScalarGrid], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(GdrError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if fits.len() != observations.len() || masks.len() != observations.len() {
        return Err(GdrError::InvalidParameter("one fit and mask per observation required".into()));
    }
    let mut total = 0.0;
    for ((f, o), m) in fits.iter().zip(observations).zip(masks) {
        f.geometry().ensure_same(o.geometry())?;
        f.geometry().ensure_same(m.geometry())?;
        let (f, o, m) = (f.values(), o.values(), m.values());
        total += par::sum(f.len(), |l| {
            let r = (f[l] - o[l]) * m[l];
            r * r
        });
    }
    Ok(total * fits[0].geometry().voxel_volume() / (gamma * gamma))
}

/// Raw momentum-form gradient: `w + I grad(lambda)` for the density action
/// and `w - lambda grad(I)` for the intensity action.
pub fn velocity_gradient(
    action: Action,
    flow: &FlowState,
    states: &[ScalarGrid],
    costate: &CostateTrajectory,
) -> Result<Vec<VectorGrid>> {
    if states.len() != flow.points() || costate.points() != flow.points() {
        return Err(GdrError::InvalidParameter("state/costate length differs from time grid".into()));
    }
    (0..flow.points())
        .map(|j| {
            let w = &flow.w.w[j];
            let geom = *w.geometry();
            let (scale, field, grad) = match action {
                Action::Density => (1.0, states[j].values(), grid::gradient(&costate.after[j])),
                Action::Intensity => (-1.0, costate.after[j].values(), grid::gradient(&states[j])),
            };
            let comps = (0..geom.ndim())
                .map(|k| {
                    let (wk, gk) = (w.component(k), grad.component(k));
                    par::collect(geom.len(), |l| wk[l] + scale * field[l] * gk[l])
                })
                .collect();
            VectorGrid::new(geom, comps)
        })
        .collect()
}

fn weighted_average(num: Vec<f64>, den: Vec<f64>, geom: crate::grid::GridGeometry) -> ScalarGrid {
    let data = num.iter().zip(&den).map(|(n, d)| if *d < TEMPLATE_MIN_WEIGHT { 0.0 } else { n / d }).collect();
    ScalarGrid::from_vec_unchecked(geom, data)
}

/// `sum_i (I_i M_i) o phi_i / sum_i (|D phi_i^{-1}| M_i) o phi_i`.
pub fn update_template_gdr(ts: &TimeSeries, flow: &FlowState) -> Result<ScalarGrid> {
    masked_density_template(ts.images(), ts.masks(), flow)
}

fn masked_density_template(images: &[ScalarGrid], masks: &[ScalarGrid], flow: &FlowState) -> Result<ScalarGrid> {
    let geom = *images[0].geometry();
    let mut num = vec![0.0; geom.len()];
    let mut den = vec![0.0; geom.len()];
    for (i, (img, mask)) in images.iter().zip(masks).enumerate() {
        let j = flow.time_grid.obs_index(i);
        let phi = &flow.phi[j];
        let a = grid::pull_back(&img.zip_map(mask, |x, m| x * m)?, phi)?;
        let b = grid::pull_back(&flow.jac_inv[j].zip_map(mask, |x, m| x * m)?, phi)?;
        for l in 0..geom.len() {
            num[l] += a.values()[l];
            den[l] += b.values()[l];
        }
    }
    Ok(weighted_average(num, den, geom))
}

/// `sum_i |D phi_i| I_i o phi_i / sum_i |D phi_i|`.
pub fn update_template_gir(ts: &TimeSeries, flow: &FlowState) -> Result<ScalarGrid> {
    let geom = *ts.geometry();
    let mut num = vec![0.0; geom.len()];
    let mut den = vec![0.0; geom.len()];
    for (i, img) in ts.images().iter().enumerate() {
        let j = flow.time_grid.obs_index(i);
        let warped = grid::pull_back(img, &flow.phi[j])?;
        let jac = flow.jac_fwd[j].values();
        for l in 0..geom.len() {
            num[l] += jac[l] * warped.values()[l];
            den[l] += jac[l];
        }
    }
    Ok(weighted_average(num, den, geom))
}

pub fn update_template(rule: TemplateRule, ts: &TimeSeries, flow: &FlowState) -> Result<ScalarGrid> {
    match rule {
        TemplateRule::Density => update_template_gdr(ts, flow),
        TemplateRule::JacobianWeighted => update_template_gir(ts, flow),
    }
}

/// A regression objective on one resolution level.
pub struct Problem<'a> {
    ts: &'a TimeSeries,
    masks: Vec<ScalarGrid>,
    pub time_grid: TimeGrid,
    pub kernel: GaussianKernel,
    pub gamma: f64,
    pub formulation: Formulation,
    pub driver: Driver,
    pub scheme: GradientScheme,
    pub template_iterations: usize,
    weights: Arc<[f64]>,
}

impl<'a> Problem<'a> {
    pub fn new(
        ts: &'a TimeSeries,
        k: usize,
        kernel: GaussianKernel,
        gamma: f64,
        formulation: Formulation,
        driver: Driver,
    ) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(GdrError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let time_grid = TimeGrid::new(ts.times(), k)?;
        let masks = if formulation.use_masks { ts.masks().to_vec() } else { ts.without_masks().masks().to_vec() };
        let weights: Arc<[f64]> = time_grid.weights().into();
        let scheme = GradientScheme::default();
        Ok(Problem {
            ts,
            masks,
            time_grid,
            kernel,
            gamma,
            formulation,
            driver,
            scheme,
            template_iterations: DEFAULT_TEMPLATE_ITERATIONS,
            weights,
        })
    }

    pub fn series(&self) -> &TimeSeries {
        self.ts
    }

    /// Masks entering the cost (all ones when the formulation ignores masks).
    pub fn masks(&self) -> &[ScalarGrid] {
        &self.masks
    }

    pub fn momentum(&self, raw: Vec<VectorGrid>) -> Momentum {
        Momentum::new(raw, &self.kernel, self.weights.clone())
    }

    pub fn zero_momentum(&self) -> Momentum {
        let raw = vec![VectorGrid::zeros(*self.ts.geometry()); self.time_grid.points()];
        Momentum { smooth: raw.clone(), raw, weights: self.weights.clone() }
    }

    pub fn flow(&self, w: &Momentum) -> Result<FlowState> {
        FlowState::solve(self.time_grid.clone(), w.to_field(), w.smooth.clone())
    }

    pub fn states(&self, flow: &FlowState, template: &ScalarGrid) -> Result<Vec<ScalarGrid>> {
        match self.driver {
            Driver::Fot => density::state_flow_fot(self.formulation.action, template, flow),
            Driver::Foi => density::state_flow_foi(self.formulation.action, template, flow),
        }
    }

    pub fn fits<'s>(&self, states: &'s [ScalarGrid]) -> Vec<&'s ScalarGrid> {
        (0..self.ts.len()).map(|i| &states[self.time_grid.obs_index(i)]).collect()
    }

    pub fn assess(&self, flow: &FlowState, template: &ScalarGrid) -> Result<Assessment> {
        template.geometry().ensure_same(self.ts.geometry())?;
        let states = self.states(flow, template)?;
        if let Some(s) = states.iter().find_map(|s| s.check_finite().err()) {
            return Err(s);
        }
        let fits: Vec<ScalarGrid> = self.fits(&states).into_iter().cloned().collect();
        let data = data_term(&fits, self.ts.images(), &self.masks, self.gamma)?;
        let metric = kernel::metric_energy_unchecked(&flow.w.w, &flow.v, &self.weights);
        Ok(Assessment { states, metric, data, total: metric + data })
    }

    pub fn costate(&self, flow: &FlowState, states: &[ScalarGrid]) -> Result<CostateTrajectory> {
        let terms = ObservationTerms { observations: self.ts.images(), masks: &self.masks, gamma: self.gamma };
        match self.driver {
            Driver::Fot => density::costate_flow_fot(self.formulation.action, states, &terms, flow),
            Driver::Foi => density::costate_flow_foi(self.formulation.action, states, &terms, flow),
        }
    }

    pub fn with_scheme(mut self, scheme: GradientScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn gradient(&self, flow: &FlowState, assessment: &Assessment) -> Result<Momentum> {
        let raw = match self.scheme {
            GradientScheme::Costate => {
                let costate = self.costate(flow, &assessment.states)?;
                velocity_gradient(self.formulation.action, flow, &assessment.states, &costate)?
            }
            GradientScheme::Discrete => self.discrete_gradient(flow, assessment)?,
        };
        Ok(self.momentum(raw))
    }

    /// `w_j + (dC/dv_j) / (dt_j vol)`: the Riesz representer of the exact
    /// derivative in the momentum inner product.
    fn discrete_gradient(&self, flow: &FlowState, assessment: &Assessment) -> Result<Vec<VectorGrid>> {
        let geom = *self.ts.geometry();
        let vol = geom.voxel_volume();
        let i_bar = self.data_derivative(&assessment.states)?;
        let action = self.formulation.action;
        let v_bar = match self.driver {
            Driver::Fot => {
                // phi_0 is the identity, so the first state is the template
                let template = &assessment.states[0];
                adjoint::velocity_derivative_fot(action, flow, template, &i_bar)?
            }
            Driver::Foi => adjoint::velocity_derivative_foi(action, flow, &assessment.states, &i_bar)?,
        };
        Ok(flow
            .w
            .w
            .iter()
            .zip(&v_bar)
            .zip(self.weights.iter())
            .map(|((w, vb), dt)| {
                let s = 1.0 / (dt * vol);
                let comps = (0..geom.ndim())
                    .map(|k| w.component(k).iter().zip(vb.component(k)).map(|(a, b)| a + s * b).collect())
                    .collect();
                VectorGrid::from_components_unchecked(geom, comps)
            })
            .collect())
    }

    /// `dD/dI(t_i)` of the data term at every observation.
    fn data_derivative(&self, states: &[ScalarGrid]) -> Result<Vec<ScalarGrid>> {
        let geom = *self.ts.geometry();
        let c = 2.0 * geom.voxel_volume() / (self.gamma * self.gamma);
        self.fits(states)
            .into_iter()
            .zip(self.ts.images())
            .zip(&self.masks)
            .map(|((f, o), m)| {
                let (f, o, m) = (f.values(), o.values(), m.values());
                ScalarGrid::new(geom, par::collect(f.len(), |l| c * (f[l] - o[l]) * m[l] * m[l]))
            })
            .collect()
    }

    /// Gradient of the data term with respect to the template values.
    pub fn template_gradient(&self, flow: &FlowState, template: &ScalarGrid) -> Result<ScalarGrid> {
        let states = self.states(flow, template)?;
        let i_bar = self.data_derivative(&states)?;
        let action = self.formulation.action;
        match self.driver {
            Driver::Fot => adjoint::template_derivative_fot(action, flow, &i_bar),
            Driver::Foi => adjoint::template_derivative_foi(action, flow, &states, &i_bar),
        }
    }

    /// Flow, cost and gradient for momentum `w` at a fixed template.
    pub fn evaluate(&self, w: &Momentum, template: &ScalarGrid) -> Result<(FlowState, Assessment, Momentum)> {
        let flow = self.flow(w)?;
        let assessment = self.assess(&flow, template)?;
        let grad = self.gradient(&flow, &assessment)?;
        Ok((flow, assessment, grad))
    }

    pub fn cost(&self, w: &Momentum, template: &ScalarGrid) -> Result<f64> {
        let flow = self.flow(w)?;
        Ok(self.assess(&flow, template)?.total)
    }

    /// Closed-form template for `flow`.
    pub fn closed_form_template(&self, flow: &FlowState) -> Result<ScalarGrid> {
        match self.formulation.template {
            TemplateRule::Density => masked_density_template(self.ts.images(), &self.masks, flow),
            TemplateRule::JacobianWeighted => update_template_gir(self.ts, flow),
        }
    }

    pub fn with_template_iterations(mut self, iterations: usize) -> Self {
        self.template_iterations = iterations;
        self
    }

    /// Template for `flow`. The density template is the minimiser of the
    /// data term, so its closed form is polished by `template_iterations`
    /// conjugate gradient steps on the discrete data term. The
    /// Jacobian-weighted rule is a fixed formula and is returned as is.
    pub fn template(&self, flow: &FlowState) -> Result<ScalarGrid> {
        let start = self.closed_form_template(flow)?;
        match self.formulation.template {
            TemplateRule::Density => self.refine_template(flow, start, self.template_iterations),
            TemplateRule::JacobianWeighted => Ok(start),
        }
    }

    /// Preconditioned CG on `H x = b`, where the data term has gradient
    /// `H x - b`; the preconditioner is the inverse row sum `1 / (H 1)`.
    pub fn refine_template(&self, flow: &FlowState, start: ScalarGrid, iterations: usize) -> Result<ScalarGrid> {
        if iterations == 0 {
            return Ok(start);
        }
        let geom = *start.geometry();
        let n = geom.len();
        let dot = |a: &[f64], b: &[f64]| par::sum(n, |l| a[l] * b[l]);
        let grad = |x: Vec<f64>| -> Result<Vec<f64>> {
            Ok(self.template_gradient(flow, &ScalarGrid::from_vec_unchecked(geom, x))?.into_values())
        };
        let minus_b = grad(vec![0.0; n])?;
        let apply = |x: Vec<f64>| -> Result<Vec<f64>> {
            let mut g = grad(x)?;
            g.iter_mut().zip(&minus_b).for_each(|(g, mb)| *g -= mb);
            Ok(g)
        };
        let row_sum = apply(vec![1.0; n])?;
        let peak = row_sum.iter().cloned().fold(0.0, f64::max);
        let precond: Vec<f64> =
            row_sum.iter().map(|&r| if r > TEMPLATE_MIN_WEIGHT * peak.max(1.0) { 1.0 / r } else { 0.0 }).collect();

        let mut x = start.into_values();
        let mut r: Vec<f64> = grad(x.clone())?.into_iter().map(|g| -g).collect();
        let b_norm = dot(&minus_b, &minus_b).sqrt();
        let mut z: Vec<f64> = r.iter().zip(&precond).map(|(r, m)| r * m).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..iterations {
            if dot(&r, &r).sqrt() <= TEMPLATE_CG_TOLERANCE * b_norm || rz <= 0.0 {
                break;
            }
            let hp = apply(p.clone())?;
            let php = dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let alpha = rz / php;
            for l in 0..n {
                x[l] += alpha * p[l];
                r[l] -= alpha * hp[l];
            }
            z = r.iter().zip(&precond).map(|(r, m)| r * m).collect();
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for l in 0..n {
                p[l] = z[l] + beta * p[l];
            }
        }
        Ok(ScalarGrid::from_vec_unchecked(geom, x))
    }
}
