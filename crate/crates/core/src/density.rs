//! HU/density conversion, the two group actions, and state and costate
//! propagation for both drivers.
//!
//! Density regression (GDR) transports images with the mass-preserving
//! action `|D phi^{-1}| I o phi^{-1}`; its costate is advected. Intensity
//! regression (GIR) warps images with `I o phi^{-1}`; its costate obeys a
//! continuity equation. Each propagation routine takes an [`Action`].

use crate::error::{GdrError, Result};
use crate::flow::FlowState;
use crate::grid::{self, GridGeometry, ScalarGrid, Stencil, VectorGrid};
use crate::par;

pub const HU_AIR: f64 = -1000.0;
pub const HU_TISSUE: f64 = 55.0;
/// Sanity bounds on input CT values.
pub const HU_RANGE: (f64, f64) = (-1100.0, 3000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    /// `|D phi^{-1}| I o phi^{-1}`
    Density,
    /// `I o phi^{-1}`
    Intensity,
}

pub fn hu_to_density(ct: &ScalarGrid) -> Result<ScalarGrid> {
    let (lo, hi) = HU_RANGE;
    if let Some((index, &value)) = ct.values().iter().enumerate().find(|(_, &x)| !(lo..=hi).contains(&x)) {
        if !value.is_finite() {
            return Err(GdrError::NonFinite { index });
        }
        return Err(GdrError::OutOfRange { index, value, min: lo, max: hi });
    }
    Ok(ct.map(|x| (x - HU_AIR) / (HU_TISSUE - HU_AIR)))
}

pub fn density_to_hu(image: &ScalarGrid) -> ScalarGrid {
    image.map(|x| (HU_TISSUE - HU_AIR) * x + HU_AIR)
}

/// `jac_inv(x) * I(x + u_inv(x))`.
pub fn density_action(image: &ScalarGrid, phi_inv: &VectorGrid, jac_inv: &ScalarGrid) -> Result<ScalarGrid> {
    image.geometry().ensure_same(jac_inv.geometry())?;
    let warped = grid::pull_back(image, phi_inv)?;
    warped.zip_map(jac_inv, |a, j| a * j)
}

/// `I(x + u_inv(x))`.
pub fn intensity_action(image: &ScalarGrid, phi_inv: &VectorGrid) -> Result<ScalarGrid> {
    grid::pull_back(image, phi_inv)
}

/// Applies `action` at time point `j` of `flow`.
pub fn act(action: Action, image: &ScalarGrid, flow: &FlowState, j: usize) -> Result<ScalarGrid> {
    match action {
        Action::Density => density_action(image, &flow.phi_inv[j], &flow.jac_inv[j]),
        Action::Intensity => intensity_action(image, &flow.phi_inv[j]),
    }
}

/// Flow-of-transformations state: the template acted on at every time point.
pub fn state_flow_fot(action: Action, template: &ScalarGrid, flow: &FlowState) -> Result<Vec<ScalarGrid>> {
    (0..flow.points()).map(|j| act(action, template, flow, j)).collect()
}

/// One Euler step of `dI/dt = -div(I v)` (density) or `-grad(I).v` (intensity).
pub fn state_step_foi(action: Action, image: &ScalarGrid, v: &VectorGrid, dt: f64) -> Result<ScalarGrid> {
    let rate = match action {
        Action::Density => grid::divergence_of_product(image, v)?,
        Action::Intensity => advection(image, v)?,
    };
    image.zip_map(&rate, |i, r| i - dt * r)
}

/// Flow-of-images state trajectory by explicit Euler stepping from the template.
pub fn state_flow_foi(action: Action, template: &ScalarGrid, flow: &FlowState) -> Result<Vec<ScalarGrid>> {
    let tg = &flow.time_grid;
    let mut states = Vec::with_capacity(tg.points());
    states.push(template.clone());
    for j in 0..tg.points() - 1 {
        let next = state_step_foi(action, &states[j], &flow.v[j], tg.dt(j))?;
        states.push(next);
    }
    Ok(states)
}

/// `grad(I) . v`
pub fn advection(image: &ScalarGrid, v: &VectorGrid) -> Result<ScalarGrid> {
    image.geometry().ensure_same(v.geometry())?;
    let g = grid::gradient(image);
    let geom = *image.geometry();
    let data = par::collect(geom.len(), |l| (0..geom.ndim()).map(|k| g.component(k)[l] * v.component(k)[l]).sum());
    ScalarGrid::new(geom, data)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(GdrError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `(2 / gamma^2) (I_end - obs) M`.
pub fn costate_terminal(end: &ScalarGrid, obs: &ScalarGrid, mask: &ScalarGrid, gamma: f64) -> Result<ScalarGrid> {
    check_gamma(gamma)?;
    end.geometry().ensure_same(obs.geometry())?;
    end.geometry().ensure_same(mask.geometry())?;
    let c = 2.0 / (gamma * gamma);
    let (a, b, m) = (end.values(), obs.values(), mask.values());
    Ok(ScalarGrid::from_vec_unchecked(*end.geometry(), par::collect(a.len(), |l| c * (a[l] - b[l]) * m[l])))
}

/// `lambda(t_i^-) = lambda(t_i^+) + (2 / gamma^2) (I(t_i) - I_i) M_i`.
pub fn costate_jump(
    after: &ScalarGrid,
    state: &ScalarGrid,
    obs: &ScalarGrid,
    mask: &ScalarGrid,
    gamma: f64,
) -> Result<ScalarGrid> {
    after.geometry().ensure_same(state.geometry())?;
    let residual = costate_terminal(state, obs, mask, gamma)?;
    after.zip_map(&residual, |a, r| a + r)
}

/// Costate values along the time grid.
///
/// `after[j]` is `lambda(t_j^+)`, the value that enters the gradient at time
/// point `j`; it is zero at the final point. `at_observations[i]` is
/// `lambda(t_i^-)`, including the jump of observation `i`; the entry for the
/// last observation is the terminal condition. The jump at `t_0` is recorded
/// but affects nothing.
#[derive(Debug, Clone)]
pub struct CostateTrajectory {
    pub after: Vec<ScalarGrid>,
    pub at_observations: Vec<ScalarGrid>,
}

impl CostateTrajectory {
    pub fn points(&self) -> usize {
        self.after.len()
    }
}

/// Observation data entering the costate: `(state at t_i, observation, mask)`.
pub struct ObservationTerms<'a> {
    pub observations: &'a [ScalarGrid],
    pub masks: &'a [ScalarGrid],
    pub gamma: f64,
}

/// Flow-of-transformations costate. Within `[t_{i-1}, t_i)` the costate is
/// `lambda(t_i^-) o phi_{t_i} o phi_t^{-1}`, multiplied for the intensity
/// action by `|D(phi_{t_i} o phi_t^{-1})|`.
pub fn costate_flow_fot(
    action: Action,
    states: &[ScalarGrid],
    obs: &ObservationTerms<'_>,
    flow: &FlowState,
) -> Result<CostateTrajectory> {
    backward(states, obs, flow, |lambda_obs, i, j| {
        let ji = flow.time_grid.obs_index(i);
        transport_fot(action, lambda_obs, flow, ji, j)
    })
}

/// Flow-of-images costate by backward Euler stepping,
/// `lambda_j = lambda_{j+1} + dt grad(lambda_{j+1}) . v_j` (density) or
/// `+ dt div(lambda_{j+1} v_j)` (intensity).
pub fn costate_flow_foi(
    action: Action,
    states: &[ScalarGrid],
    obs: &ObservationTerms<'_>,
    flow: &FlowState,
) -> Result<CostateTrajectory> {
    let tg = &flow.time_grid;
    let p = tg.points();
    let n = tg.n_obs();
    check_lengths(states, obs, flow)?;
    let geom = *states[0].geometry();
    let mut after = vec![ScalarGrid::zeros(geom); p];
    let mut at_obs = vec![ScalarGrid::zeros(geom); n];
    at_obs[n - 1] = costate_terminal(&states[p - 1], &obs.observations[n - 1], &obs.masks[n - 1], obs.gamma)?;
    let mut current = at_obs[n - 1].clone();
    for i in (1..n).rev() {
        let (j0, j1) = (tg.obs_index(i - 1), tg.obs_index(i));
        for j in (j0..j1).rev() {
            current = costate_step_foi(action, &current, &flow.v[j], tg.dt(j))?;
            after[j] = current.clone();
        }
        at_obs[i - 1] = costate_jump(&after[j0], &states[j0], &obs.observations[i - 1], &obs.masks[i - 1], obs.gamma)?;
        current = at_obs[i - 1].clone();
    }
    Ok(CostateTrajectory { after, at_observations: at_obs })
}

/// One backward costate step.
pub fn costate_step_foi(action: Action, lambda: &ScalarGrid, v: &VectorGrid, dt: f64) -> Result<ScalarGrid> {
    let rate = match action {
        Action::Density => advection(lambda, v)?,
        Action::Intensity => grid::divergence_of_product(lambda, v)?,
    };
    lambda.zip_map(&rate, |l, r| l + dt * r)
}

fn check_lengths(states: &[ScalarGrid], obs: &ObservationTerms<'_>, flow: &FlowState) -> Result<()> {
    let tg = &flow.time_grid;
    if states.len() != tg.points() || obs.observations.len() != tg.n_obs() || obs.masks.len() != tg.n_obs() {
        return Err(GdrError::InvalidParameter(format!(
            "{} states, {} observations, {} masks for {} points / {} observations",
            states.len(),
            obs.observations.len(),
            obs.masks.len(),
            tg.points(),
            tg.n_obs()
        )));
    }
    Ok(())
}

fn backward<F>(
    states: &[ScalarGrid],
    obs: &ObservationTerms<'_>,
    flow: &FlowState,
    transport: F,
) -> Result<CostateTrajectory>
where
    F: Fn(&ScalarGrid, usize, usize) -> Result<ScalarGrid>,
{
    let tg = &flow.time_grid;
    let p = tg.points();
    let n = tg.n_obs();
    check_lengths(states, obs, flow)?;
    let geom = *states[0].geometry();
    let mut after = vec![ScalarGrid::zeros(geom); p];
    let mut at_obs = vec![ScalarGrid::zeros(geom); n];
    at_obs[n - 1] = costate_terminal(&states[p - 1], &obs.observations[n - 1], &obs.masks[n - 1], obs.gamma)?;
    for i in (1..n).rev() {
        let (j0, j1) = (tg.obs_index(i - 1), tg.obs_index(i));
        for j in j0..j1 {
            after[j] = transport(&at_obs[i], i, j)?;
        }
        at_obs[i - 1] = costate_jump(&after[j0], &states[j0], &obs.observations[i - 1], &obs.masks[i - 1], obs.gamma)?;
    }
    Ok(CostateTrajectory { after, at_observations: at_obs })
}

/// Transports a costate given at observation point `ji` back to point `j`.
fn transport_fot(action: Action, lambda: &ScalarGrid, flow: &FlowState, ji: usize, j: usize) -> Result<ScalarGrid> {
    let geom: GridGeometry = *lambda.geometry();
    let inv = &flow.phi_inv[j];
    let fwd = &flow.phi[ji];
    let lam = lambda.values();
    let data = match action {
        Action::Density => {
            let m = grid::compose(fwd, inv)?;
            return grid::pull_back(lambda, &m);
        }
        Action::Intensity => {
            let jf = flow.jac_fwd[ji].values();
            let ji_inv = flow.jac_inv[j].values();
            par::collect(geom.len(), |l| {
                let ui = inv.at(l);
                let sy = Stencil::displaced(&geom, l, &ui);
                let uf = fwd.apply_stencil(&sy);
                let mut total = [0.0; grid::MAX_DIM];
                for k in 0..geom.ndim() {
                    total[k] = ui[k] + uf[k];
                }
                let sz = Stencil::displaced(&geom, l, &total);
                sz.apply(lam) * sy.apply(jf) * ji_inv[l]
            })
        }
    };
    Ok(ScalarGrid::from_vec_unchecked(geom, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::TimeGrid;
    use crate::kernel::{GaussianKernel, MomentumField};
    use approx::assert_abs_diff_eq;

    fn blob(g: GridGeometry, c: &[f64], s: f64) -> ScalarGrid {
        let c = c.to_vec();
        ScalarGrid::from_fn(g, move |p| {
            let r2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            (-r2 / (2.0 * s * s)).exp()
        })
    }

    fn swirl(g: GridGeometry, amp: f64) -> VectorGrid {
        let c = [g.extent(0) / 2.0, g.extent(1) / 2.0];
        VectorGrid::from_fn(g, |p| {
            let (x, y) = (p[0] - c[0], p[1] - c[1]);
            let b = amp * (-(x * x + y * y) / (2.0 * 64.0)).exp();
            vec![b * (0.5 - 0.06 * y), b * (0.2 + 0.05 * x)]
        })
    }

    fn flow_for(g: GridGeometry, tg: TimeGrid, amp: f64) -> FlowState {
        let w = MomentumField { w: vec![swirl(g, amp); tg.points()] };
        let v = w.velocities(&GaussianKernel::new(2.0).unwrap());
        FlowState::solve(tg, w, v).unwrap()
    }

    #[test]
    fn hu_conversion_examples() {
        let g = GridGeometry::isotropic(&[3], 1.0).unwrap();
        let ct = ScalarGrid::new(g, vec![-1000.0, 55.0, 0.0]).unwrap();
        let d = hu_to_density(&ct).unwrap();
        assert_eq!(d.values()[0], 0.0);
        assert_abs_diff_eq!(d.values()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.values()[2], 1000.0 / 1055.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.values()[2], 0.94787, epsilon = 1e-5);
        let back = density_to_hu(&d);
        for (a, b) in back.values().iter().zip(ct.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let bad = ScalarGrid::new(g, vec![0.0, -1200.0, 0.0]).unwrap();
        assert!(matches!(hu_to_density(&bad), Err(GdrError::OutOfRange { index: 1, .. })));
    }

    #[test]
    fn identity_actions() {
        let g = GridGeometry::isotropic(&[7, 6], 1.5).unwrap();
        let img = ScalarGrid::from_fn(g, |p| p[0].sin() + p[1]);
        let id = VectorGrid::zeros(g);
        let one = ScalarGrid::filled(g, 1.0);
        assert_eq!(density_action(&img, &id, &one).unwrap(), img);
        assert_eq!(intensity_action(&img, &id).unwrap(), img);
    }

    #[test]
    fn scaling_action_in_1d() {
        // phi(x) = 2x, so phi^{-1}(y) = y/2 and |D phi^{-1}| = 1/2.
        let g = GridGeometry::new(&[41], &[0.5], &[-10.0]).unwrap();
        let img = ScalarGrid::from_fn(g, |p| 1.0 + 0.1 * p[0]);
        let inv = VectorGrid::from_fn(g, |p| vec![-0.5 * p[0]]);
        let jac = ScalarGrid::filled(g, 0.5);
        let out = density_action(&img, &inv, &jac).unwrap();
        let warped = intensity_action(&img, &inv).unwrap();
        for l in 0..g.len() {
            let y = g.position(l)[0];
            assert_abs_diff_eq!(out.values()[l], 0.5 * (1.0 + 0.05 * y), epsilon = 1e-12);
            assert_abs_diff_eq!(warped.values()[l], 1.0 + 0.05 * y, epsilon = 1e-12);
        }
    }

    #[test]
    fn translation_shifts_intensity() {
        let g = GridGeometry::isotropic(&[12, 12], 1.0).unwrap();
        let img = ScalarGrid::from_fn(g, |p| p[0] * 3.0 + p[1]);
        let inv = VectorGrid::constant(g, &[-2.0, 1.0]);
        let out = intensity_action(&img, &inv).unwrap();
        for l in 0..g.len() {
            let i = g.voxel_index(l);
            if i[0] >= 2 && i[1] + 1 < 12 {
                let p = g.position(l);
                assert_abs_diff_eq!(out.values()[l], (p[0] - 2.0) * 3.0 + p[1] + 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn density_action_conserves_mass() {
        let g = GridGeometry::isotropic(&[48, 48], 1.0).unwrap();
        let img = blob(g, &[24.0, 22.0], 4.0);
        let f = flow_for(g, TimeGrid::uniform(2, 10).unwrap(), 3.0);
        let m0 = img.integral();
        let moved = density_action(&img, &f.phi_inv[10], &f.jac_inv[10]).unwrap();
        assert!((moved.integral() - m0).abs() < 0.01 * m0);
        // the plain warp does not conserve mass under the same compressive flow
        let warped = intensity_action(&img, &f.phi_inv[10]).unwrap();
        let diff = moved.zip_map(&warped, |a, b| (a - b).abs()).unwrap().max();
        let jac_dev = f.jac_inv[10].map(|x| (x - 1.0).abs()).max();
        assert!(diff <= jac_dev * img.max() + 1e-12);
    }

    #[test]
    fn intensity_action_preserves_range() {
        let g = GridGeometry::isotropic(&[32, 32], 1.0).unwrap();
        let img = blob(g, &[15.0, 17.0], 3.0).map(|x| 2.0 * x - 0.5);
        let f = flow_for(g, TimeGrid::uniform(2, 8).unwrap(), 4.0);
        let out = intensity_action(&img, &f.phi_inv[8]).unwrap();
        assert!(out.min() >= img.min() && out.max() <= img.max());
    }

    #[test]
    fn zero_velocity_state_is_constant() {
        let g = GridGeometry::isotropic(&[10, 10], 1.0).unwrap();
        let tg = TimeGrid::uniform(3, 3).unwrap();
        let f = FlowState::identity(tg, g);
        let img = blob(g, &[5.0, 4.0], 2.0);
        for action in [Action::Density, Action::Intensity] {
            let s = state_flow_fot(action, &img, &f).unwrap();
            assert!(s.iter().all(|x| *x == img));
            let s = state_flow_foi(action, &img, &f).unwrap();
            assert!(s.iter().all(|x| *x == img));
        }
    }

    #[test]
    fn foi_step_with_divergence_free_field_keeps_constant_image() {
        let g = GridGeometry::isotropic(&[16, 16], 1.0).unwrap();
        let v = VectorGrid::from_fn(g, |p| vec![-(p[1] - 7.5), p[0] - 7.5]);
        let img = ScalarGrid::filled(g, 0.8);
        let next = state_step_foi(Action::Density, &img, &v, 0.1).unwrap();
        for l in 0..g.len() {
            if g.is_interior(l, 1) {
                assert_abs_diff_eq!(next.values()[l], 0.8, epsilon = 1e-12);
            }
        }
        assert_eq!(state_step_foi(Action::Density, &img, &VectorGrid::zeros(g), 0.1).unwrap(), img);
    }

    #[test]
    fn foi_and_fot_states_agree_on_smooth_input() {
        let g = GridGeometry::isotropic(&[40, 40], 1.0).unwrap();
        let img = blob(g, &[20.0, 20.0], 6.0);
        let mut errs = Vec::new();
        for k in [4, 8, 16] {
            let f = flow_for(g, TimeGrid::uniform(2, k).unwrap(), 2.0);
            let a = state_flow_fot(Action::Density, &img, &f).unwrap();
            let b = state_flow_foi(Action::Density, &img, &f).unwrap();
            let d = a[k].zip_map(&b[k], |x, y| (x - y).abs()).unwrap().max();
            errs.push(d);
        }
        assert!(errs[2] < 0.02, "{errs:?}");
        assert!(errs[2] < errs[0], "{errs:?}");
    }

    #[test]
    fn costate_boundary_examples() {
        let g = GridGeometry::isotropic(&[4], 1.0).unwrap();
        let obs = ScalarGrid::filled(g, 1.0);
        let end = ScalarGrid::filled(g, 1.5);
        let ones = ScalarGrid::filled(g, 1.0);
        let zeros = ScalarGrid::zeros(g);
        let t = costate_terminal(&end, &obs, &ones, 0.1).unwrap();
        assert!(t.values().iter().all(|&x| (x - 100.0).abs() < 1e-9));
        assert!(costate_terminal(&obs, &obs, &ones, 0.1).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(costate_terminal(&end, &obs, &zeros, 0.1).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(costate_terminal(&end, &obs, &ones, 0.0).is_err());
        assert!(costate_terminal(&end, &obs, &ones, -1.0).is_err());

        let lam = ScalarGrid::from_fn(g, |p| p[0]);
        assert_eq!(costate_jump(&lam, &obs, &obs, &ones, 0.3).unwrap(), lam);
        assert_eq!(costate_jump(&zeros, &end, &obs, &ones, 0.1).unwrap(), t);
        let a = costate_jump(&costate_jump(&lam, &end, &obs, &ones, 0.2).unwrap(), &obs, &end, &ones, 0.5).unwrap();
        let b = costate_jump(&costate_jump(&lam, &obs, &end, &ones, 0.5).unwrap(), &end, &obs, &ones, 0.2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    fn series(g: GridGeometry, n: usize) -> (Vec<ScalarGrid>, Vec<ScalarGrid>) {
        let obs = (0..n).map(|i| blob(g, &[10.0 + i as f64, 12.0], 3.0)).collect();
        (obs, vec![ScalarGrid::filled(g, 1.0); n])
    }

    #[test]
    fn zero_velocity_costate_is_piecewise_constant() {
        let g = GridGeometry::isotropic(&[24, 24], 1.0).unwrap();
        let tg = TimeGrid::uniform(3, 4).unwrap();
        let f = FlowState::identity(tg.clone(), g);
        let (obs, masks) = series(g, 3);
        let template = blob(g, &[11.0, 12.0], 3.0);
        let terms = ObservationTerms { observations: &obs, masks: &masks, gamma: 0.5 };
        for action in [Action::Density, Action::Intensity] {
            let states = state_flow_fot(action, &template, &f).unwrap();
            let c = costate_flow_fot(action, &states, &terms, &f).unwrap();
            let term = costate_terminal(&template, &obs[2], &masks[2], 0.5).unwrap();
            assert_eq!(c.at_observations[2], term);
            for j in 4..8 {
                assert_eq!(c.after[j], term);
            }
            for j in 0..4 {
                assert_eq!(c.after[j], c.at_observations[1]);
            }
            assert!(c.after[8].values().iter().all(|&x| x == 0.0));
            let jump = costate_jump(&term, &template, &obs[1], &masks[1], 0.5).unwrap();
            assert_eq!(c.at_observations[1], jump);

            let c2 = costate_flow_foi(action, &states, &terms, &f).unwrap();
            for j in 0..9 {
                assert_eq!(c2.after[j], c.after[j]);
            }
        }
    }

    #[test]
    fn two_observation_costate_is_composition() {
        let g = GridGeometry::isotropic(&[32, 32], 1.0).unwrap();
        let tg = TimeGrid::uniform(2, 6).unwrap();
        let f = flow_for(g, tg, 3.0);
        let (obs, masks) = series(g, 2);
        let states = state_flow_fot(Action::Density, &blob(g, &[14.0, 15.0], 4.0), &f).unwrap();
        let terms = ObservationTerms { observations: &obs, masks: &masks, gamma: 1.0 };
        let c = costate_flow_fot(Action::Density, &states, &terms, &f).unwrap();
        for j in 0..6 {
            let m = grid::compose(&f.phi[6], &f.phi_inv[j]).unwrap();
            let expect = grid::pull_back(&c.at_observations[1], &m).unwrap();
            assert_eq!(c.after[j], expect);
        }
    }

    #[test]
    fn intensity_costate_conserves_integral_along_interval() {
        // lambda' = -div(lambda v): the integral of lambda is transported unchanged.
        let g = GridGeometry::isotropic(&[48, 48], 1.0).unwrap();
        let tg = TimeGrid::uniform(2, 8).unwrap();
        let f = flow_for(g, tg, 3.0);
        let obs = vec![ScalarGrid::zeros(g), blob(g, &[24.0, 24.0], 4.0)];
        let masks = vec![ScalarGrid::filled(g, 1.0); 2];
        let states = vec![ScalarGrid::zeros(g); 9];
        let terms = ObservationTerms { observations: &obs, masks: &masks, gamma: 1.0 };
        let c = costate_flow_fot(Action::Intensity, &states, &terms, &f).unwrap();
        let total = c.at_observations[1].integral();
        for j in 0..8 {
            assert!((c.after[j].integral() - total).abs() < 0.01 * total.abs());
        }
    }

    #[test]
    fn fot_costate_residual_converges_in_time() {
        // lambda' + grad(lambda).v = 0 along each interval
        let g = GridGeometry::isotropic(&[64, 64], 1.0).unwrap();
        let lam = blob(g, &[30.0, 33.0], 8.0);
        let obs = vec![ScalarGrid::zeros(g), lam.clone()];
        let masks = vec![ScalarGrid::filled(g, 1.0); 2];
        let mut res = Vec::new();
        for k in [2usize, 4, 8] {
            let tg = TimeGrid::uniform(2, k).unwrap();
            let mut w = MomentumField::zeros(g, tg.points());
            for x in w.w.iter_mut() {
                *x = VectorGrid::from_fn(g, |p| {
                    let b = 12.0 * (-((p[0] - 32.0).powi(2) + (p[1] - 32.0).powi(2)) / (2.0 * 400.0)).exp();
                    vec![b, 0.5 * b]
                });
            }
            let v = w.w.clone();
            let f = FlowState::solve(tg.clone(), w, v).unwrap();
            let states = vec![ScalarGrid::zeros(g); tg.points()];
            let terms = ObservationTerms { observations: &obs, masks: &masks, gamma: (2.0f64).sqrt() };
            let c = costate_flow_fot(Action::Density, &states, &terms, &f).unwrap();
            let mut acc = 0.0;
            let mut count = 0;
            for j in 0..k - 1 {
                let next = if j + 1 == k { &c.at_observations[1] } else { &c.after[j + 1] };
                let adv = advection(next, &f.v[j]).unwrap();
                for l in 0..g.len() {
                    if g.is_interior(l, 8) {
                        let r = (next.values()[l] - c.after[j].values()[l]) / tg.dt(j) + adv.values()[l];
                        acc += r * r;
                        count += 1;
                    }
                }
            }
            res.push((acc / count as f64).sqrt());
        }
        assert!(res[0] / res[1] > 1.6 && res[1] / res[2] > 1.6, "{res:?}");
    }
}
