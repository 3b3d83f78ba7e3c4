//! Time discretization and Euler integration of the forward and inverse map
//! flows generated by a time-varying velocity field.
//!
//! The inverse flow is integrated with the Jacobian of the forward map,
//! `phi_inv[i+1] = phi_inv[i] - dt ((D phi[i]) o phi_inv[i])^{-1} v[i]`, and
//! its determinant is taken as `1 / (J(phi[i]) o phi_inv[i])`. Only first
//! derivatives of the forward maps are ever needed.

use crate::error::{GdrError, Result};
use crate::grid::{self, GridGeometry, ScalarGrid, Stencil, VectorGrid, MAX_DIM};
use crate::kernel::MomentumField;
use crate::par;

/// Smallest `|det|` accepted when inverting a sampled Jacobian.
pub const MIN_INVERTIBLE_DET: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    obs_times: Vec<f64>,
    k: usize,
    times: Vec<f64>,
    dts: Vec<f64>,
}

impl TimeGrid {
    /// `k` computational steps per observation interval, so `k * (N - 1) + 1`
    /// points with every observation on a grid point.
    pub fn new(obs_times: &[f64], k: usize) -> Result<Self> {
        let n = obs_times.len();
        if n < 2 {
            return Err(GdrError::InvalidParameter(format!("{n} observation times (need at least 2)")));
        }
        if k == 0 {
            return Err(GdrError::InvalidParameter("need at least one step per interval".into()));
        }
        if obs_times[0] != 0.0 || obs_times[n - 1] != 1.0 {
            return Err(GdrError::InvalidParameter("observation times must start at 0 and end at 1".into()));
        }
        if obs_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GdrError::InvalidParameter("observation times must be strictly increasing".into()));
        }
        let mut times = Vec::with_capacity(k * (n - 1) + 1);
        let mut dts = Vec::with_capacity(k * (n - 1));
        for w in obs_times.windows(2) {
            let dt = (w[1] - w[0]) / k as f64;
            for s in 0..k {
                times.push(w[0] + s as f64 * dt);
                dts.push(dt);
            }
        }
        times.push(1.0);
        Ok(TimeGrid { obs_times: obs_times.to_vec(), k, times, dts })
    }

    /// Uniformly spaced observations `i / (N - 1)`.
    pub fn uniform(n_obs: usize, k: usize) -> Result<Self> {
        if n_obs < 2 {
            return Err(GdrError::InvalidParameter(format!("{n_obs} observations (need at least 2)")));
        }
        let t: Vec<f64> = (0..n_obs).map(|i| i as f64 / (n_obs - 1) as f64).collect();
        Self::new(&t, k)
    }

    pub fn n_obs(&self) -> usize {
        self.obs_times.len()
    }

    pub fn obs_times(&self) -> &[f64] {
        &self.obs_times
    }

    pub fn steps_per_interval(&self) -> usize {
        self.k
    }

    /// Number of computational time points `P`.
    pub fn points(&self) -> usize {
        self.times.len()
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Step length from point `j` to `j + 1`.
    pub fn dt(&self, j: usize) -> f64 {
        self.dts[j]
    }

    pub fn obs_index(&self, i: usize) -> usize {
        i * self.k
    }

    /// Quadrature weight of each time point for time integrals; the last
    /// point reuses the final step length.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.dts.clone();
        w.push(*self.dts.last().expect("at least one step"));
        w
    }
}

/// Forward/inverse maps (as displacements), their Jacobian determinants and
/// the velocities and momenta that generated them.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub time_grid: TimeGrid,
    pub w: MomentumField,
    pub v: Vec<VectorGrid>,
    pub phi: Vec<VectorGrid>,
    pub phi_inv: Vec<VectorGrid>,
    pub jac_fwd: Vec<ScalarGrid>,
    pub jac_inv: Vec<ScalarGrid>,
}

impl FlowState {
    /// Integrates both map flows for the velocities `v = K*w`.
    pub fn solve(time_grid: TimeGrid, w: MomentumField, v: Vec<VectorGrid>) -> Result<Self> {
        if v.len() != time_grid.points() || w.len() != time_grid.points() {
            return Err(GdrError::InvalidParameter(format!(
                "{} velocities / {} momenta for {} time points",
                v.len(),
                w.len(),
                time_grid.points()
            )));
        }
        let phi = integrate_forward(&v, &time_grid)?;
        let (phi_inv, jac_fwd) = integrate_inverse_with_jacobians(&v, &phi, &time_grid)?;
        let jac_inv = jacobian_det_inverse(&jac_fwd, &phi_inv)?;
        Ok(FlowState { time_grid, w, v, phi, phi_inv, jac_fwd, jac_inv })
    }

    /// Identity flow with zero velocity.
    pub fn identity(time_grid: TimeGrid, geom: GridGeometry) -> Self {
        let p = time_grid.points();
        FlowState {
            w: MomentumField::zeros(geom, p),
            v: vec![VectorGrid::zeros(geom); p],
            phi: vec![VectorGrid::zeros(geom); p],
            phi_inv: vec![VectorGrid::zeros(geom); p],
            jac_fwd: vec![ScalarGrid::filled(geom, 1.0); p],
            jac_inv: vec![ScalarGrid::filled(geom, 1.0); p],
            time_grid,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.phi[0].geometry()
    }

    pub fn points(&self) -> usize {
        self.phi.len()
    }

    /// Max `|phi_t(phi_t^{-1}(x)) - x|` per time point, in voxels.
    pub fn inverse_consistency(&self) -> Vec<f64> {
        self.phi.iter().zip(&self.phi_inv).map(|(f, i)| inverse_consistency_error(f, i)).collect()
    }

    /// Number of voxels with non-positive forward Jacobian over all times.
    pub fn non_positive_jacobians(&self) -> usize {
        self.jac_fwd.iter().map(|j| j.values().iter().filter(|&&x| x <= 0.0).count()).sum()
    }
}

/// Euler integration of `d/dt phi_t(x) = v_t(phi_t(x))` from the identity.
/// The velocity at the final time point is not used.
pub fn integrate_forward(v: &[VectorGrid], tg: &TimeGrid) -> Result<Vec<VectorGrid>> {
    let p = tg.points();
    if v.len() != p {
        return Err(GdrError::InvalidParameter(format!("{} velocities for {p} time points", v.len())));
    }
    let geom = *v[0].geometry();
    let mut maps = Vec::with_capacity(p);
    maps.push(VectorGrid::zeros(geom));
    for j in 0..p - 1 {
        v[j].geometry().ensure_same(&geom)?;
        let dt = tg.dt(j);
        let prev = &maps[j];
        let comps = (0..geom.ndim())
            .map(|k| {
                par::collect(geom.len(), |l| {
                    let u = prev.at(l);
                    let s = Stencil::displaced(&geom, l, &u);
                    u[k] + dt * s.apply(v[j].component(k))
                })
            })
            .collect();
        maps.push(VectorGrid::from_components_unchecked(geom, comps));
    }
    Ok(maps)
}

/// Euler integration of the inverse flow using inverted forward Jacobians.
pub fn integrate_inverse(v: &[VectorGrid], phi: &[VectorGrid], tg: &TimeGrid) -> Result<Vec<VectorGrid>> {
    integrate_inverse_with_jacobians(v, phi, tg).map(|(maps, _)| maps)
}

/// As [`integrate_inverse`], also returning `J(phi[i])` at every time point.
pub fn integrate_inverse_with_jacobians(
    v: &[VectorGrid],
    phi: &[VectorGrid],
    tg: &TimeGrid,
) -> Result<(Vec<VectorGrid>, Vec<ScalarGrid>)> {
    let p = tg.points();
    if v.len() != p || phi.len() != p {
        return Err(GdrError::InvalidParameter(format!(
            "{} velocities / {} maps for {p} time points",
            v.len(),
            phi.len()
        )));
    }
    let geom = *v[0].geometry();
    let d = geom.ndim();
    let mut inv = Vec::with_capacity(p);
    let mut dets = Vec::with_capacity(p);
    inv.push(VectorGrid::zeros(geom));
    for j in 0..p {
        let jac = grid::jacobian_matrix(&phi[j]);
        dets.push(jac.determinant());
        if j == p - 1 {
            break;
        }
        let dt = tg.dt(j);
        let prev = &inv[j];
        let mut comps = vec![vec![0.0; geom.len()]; d];
        // Row-major per voxel so a single stencil serves all entries.
        let mut steps = vec![[0.0; MAX_DIM]; geom.len()];
        let failure = std::sync::Mutex::new(None::<(usize, f64)>);
        {
            use rayon::prelude::*;
            steps.par_chunks_mut(par::CHUNK).enumerate().for_each(|(c, chunk)| {
                for (o, out) in chunk.iter_mut().enumerate() {
                    let l = c * par::CHUNK + o;
                    let ui = prev.at(l);
                    let s = Stencil::displaced(&geom, l, &ui);
                    let m = jac.matrix_with(&s);
                    match m.inverse(MIN_INVERTIBLE_DET) {
                        Some(mi) => {
                            let step = mi.mul_vec(&v[j].at(l));
                            for k in 0..d {
                                out[k] = ui[k] - dt * step[k];
                            }
                        }
                        None => {
                            let mut f = failure.lock().expect("poisoned");
                            if f.map_or(true, |(voxel, _)| l < voxel) {
                                *f = Some((l, m.det()));
                            }
                        }
                    }
                }
            });
        }
        if let Some((voxel, det)) = failure.into_inner().expect("poisoned") {
            return Err(GdrError::SingularJacobian { time_index: j, voxel, det });
        }
        for (l, s) in steps.iter().enumerate() {
            for k in 0..d {
                comps[k][l] = s[k];
            }
        }
        inv.push(VectorGrid::from_components_unchecked(geom, comps));
    }
    Ok((inv, dets))
}

/// `J(phi_inv[i]) = 1 / (J(phi[i]) o phi_inv[i])`.
pub fn jacobian_det_inverse(jac_fwd: &[ScalarGrid], phi_inv: &[VectorGrid]) -> Result<Vec<ScalarGrid>> {
    jac_fwd
        .iter()
        .zip(phi_inv)
        .enumerate()
        .map(|(j, (jf, inv))| {
            let geom = *jf.geometry();
            let sampled = grid::pull_back(jf, inv)?;
            if let Some((voxel, &det)) = sampled.values().iter().enumerate().find(|(_, &x)| x <= 0.0) {
                return Err(GdrError::NonPositiveJacobian { time_index: j, voxel, det });
            }
            Ok(ScalarGrid::from_vec_unchecked(geom, sampled.values().iter().map(|x| 1.0 / x).collect()))
        })
        .collect()
}

/// Max over voxels of `|phi(phi_inv(x)) - x|` measured in voxels.
pub fn inverse_consistency_error(phi: &VectorGrid, phi_inv: &VectorGrid) -> f64 {
    let geom = *phi.geometry();
    let h = geom.spacing().to_vec();
    par::max(geom.len(), |l| {
        let ui = phi_inv.at(l);
        let s = Stencil::displaced(&geom, l, &ui);
        let uf = phi.apply_stencil(&s);
        (0..geom.ndim()).map(|k| ((ui[k] + uf[k]) / h[k]).powi(2)).sum::<f64>().sqrt()
    })
}
