//! Exact reverse-mode derivatives of the discretised forward models.
//!
//! Given `dC/dI` at the observation time points, these return `dC/dv_j`
//! for every time point: the derivative of the discrete cost with respect
//! to each velocity value on the grid (no quadrature weights applied).

use rayon::prelude::*;

use crate::density::Action;
use crate::error::{GdrError, Result};
use crate::flow::{FlowState, MIN_INVERTIBLE_DET};
use crate::grid::{self, GridGeometry, Mat, ScalarGrid, Stencil, VectorGrid, MAX_DIM};

type Field = Vec<Vec<f64>>;

fn zeros(geom: &GridGeometry, n: usize) -> Field {
    vec![vec![0.0; geom.len()]; n]
}

/// Cofactor matrix, `d det(M) / d M`.
fn cofactor(m: &Mat) -> Mat {
    let mut c = Mat::identity(m.d);
    let a = &m.m;
    match m.d {
        1 => c.m[0][0] = 1.0,
        2 => {
            c.m[0][0] = a[1][1];
            c.m[0][1] = -a[1][0];
            c.m[1][0] = -a[0][1];
            c.m[1][1] = a[0][0];
        }
        _ => {
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
                    let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
                    c.m[i][j] = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
                }
            }
        }
    }
    c
}

fn scatter(target: &mut [f64], s: &Stencil, value: f64) {
    for c in 0..s.n {
        target[s.idx[c]] += s.w[c] * value;
    }
}

struct InverseStepLocal {
    stencil: Stencil,
    rho_bar: f64,
    m_bar: [[f64; MAX_DIM]; MAX_DIM],
    r_bar: [f64; MAX_DIM],
    v_bar: [f64; MAX_DIM],
}

struct ForwardStepLocal {
    stencil: Stencil,
    f_bar: [f64; MAX_DIM],
}

/// `dC/dv_j` for the flow-of-transformations model, where `i_bar[i]` is
/// `dC/dI(t_i)` and the states are the template acted on by the flow.
pub fn velocity_derivative_fot(
    action: Action,
    flow: &FlowState,
    template: &ScalarGrid,
    i_bar: &[ScalarGrid],
) -> Result<Vec<VectorGrid>> {
    let tg = &flow.time_grid;
    let p = tg.points();
    if i_bar.len() != tg.n_obs() {
        return Err(GdrError::InvalidParameter("one cost derivative per observation required".into()));
    }
    let geom = *template.geometry();
    let d = geom.ndim();
    let n = geom.len();
    let obs_at = |j: usize| (0..tg.n_obs()).find(|&i| tg.obs_index(i) == j);

    let mut v_bar: Vec<Field> = vec![zeros(&geom, d); p];
    let mut f_next: Field = zeros(&geom, d);
    let mut g_next: Field = zeros(&geom, d);
    for j in (0..p).rev() {
        let jac = grid::jacobian_matrix(&flow.phi[j]);
        let delta = flow.jac_fwd[j].values();
        let obs = obs_at(j);
        let step = j + 1 < p;
        let inv = &flow.phi_inv[j];
        let v = &flow.v[j];
        let dt = if step { tg.dt(j) } else { 0.0 };

        // inverse-map step j and the observation at j share the stencil at x + G_j(x)
        let local: Vec<InverseStepLocal> = (0..n)
            .into_par_iter()
            .map(|l| -> Result<InverseStepLocal> {
                let c = grid::displaced_coords(&geom, l, &inv.at(l));
                let stencil = Stencil::at(&geom, &c);
                let mut out = InverseStepLocal {
                    stencil,
                    rho_bar: 0.0,
                    m_bar: [[0.0; MAX_DIM]; MAX_DIM],
                    r_bar: [0.0; MAX_DIM],
                    v_bar: [0.0; MAX_DIM],
                };
                if let Some(i) = obs {
                    let ib = i_bar[i].values()[l];
                    if ib != 0.0 {
                        let tr_grad = grid::interp_gradient(&geom, &c, template.values());
                        let (tr_bar, rho_bar) = match action {
                            Action::Density => {
                                let rho = stencil.apply(delta);
                                let tr = stencil.apply(template.values());
                                (ib / rho, -ib * tr / (rho * rho))
                            }
                            Action::Intensity => (ib, 0.0),
                        };
                        for k in 0..d {
                            out.r_bar[k] += tr_bar * tr_grad[k];
                        }
                        if rho_bar != 0.0 {
                            let dg = grid::interp_gradient(&geom, &c, delta);
                            for k in 0..d {
                                out.r_bar[k] += rho_bar * dg[k];
                            }
                            out.rho_bar = rho_bar;
                        }
                    }
                }
                if step {
                    let mut u_bar = [0.0; MAX_DIM];
                    let mut any = false;
                    for k in 0..d {
                        u_bar[k] = -dt * g_next[k][l];
                        any |= u_bar[k] != 0.0;
                    }
                    if any {
                        let m = jac.matrix_with(&stencil);
                        let mi = m.inverse(MIN_INVERTIBLE_DET).ok_or(GdrError::SingularJacobian {
                            time_index: j,
                            voxel: l,
                            det: m.det(),
                        })?;
                        let u = mi.mul_vec(&v.at(l));
                        // v_bar = M^{-T} u_bar, M_bar = -M^{-T} u_bar u^T
                        let mut mt_ubar = [0.0; MAX_DIM];
                        for a in 0..d {
                            mt_ubar[a] = (0..d).map(|b| mi.m[b][a] * u_bar[b]).sum();
                        }
                        out.v_bar = mt_ubar;
                        for a in 0..d {
                            for b in 0..d {
                                let mb = -mt_ubar[a] * u[b];
                                out.m_bar[a][b] = mb;
                                if mb != 0.0 {
                                    let eg = grid::interp_gradient(&geom, &c, jac.entry(a, b));
                                    for k in 0..d {
                                        out.r_bar[k] += mb * eg[k];
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut delta_bar = vec![0.0; n];
        let mut jac_bar: Field = zeros(&geom, d * d);
        for (l, loc) in local.iter().enumerate() {
            if loc.rho_bar != 0.0 {
                scatter(&mut delta_bar, &loc.stencil, loc.rho_bar);
            }
            for a in 0..d {
                for b in 0..d {
                    if loc.m_bar[a][b] != 0.0 {
                        scatter(&mut jac_bar[a * d + b], &loc.stencil, loc.m_bar[a][b]);
                    }
                }
                v_bar[j][a][l] += loc.v_bar[a];
            }
        }
        // G_bar_j = G_bar_{j+1} + r_bar
        let mut g_cur = if step { g_next } else { zeros(&geom, d) };
        for (l, loc) in local.iter().enumerate() {
            for k in 0..d {
                g_cur[k][l] += loc.r_bar[k];
            }
        }
        drop(local);

        // det(Jf_j) feeds the density factor
        if delta_bar.iter().any(|&x| x != 0.0) {
            for l in 0..n {
                if delta_bar[l] != 0.0 {
                    let cof = cofactor(&jac.matrix_at(l));
                    for a in 0..d {
                        for b in 0..d {
                            jac_bar[a * d + b][l] += delta_bar[l] * cof.m[a][b];
                        }
                    }
                }
            }
        }
        // Jf_j = I + D F_j
        let mut f_cur: Field = zeros(&geom, d);
        for a in 0..d {
            for b in 0..d {
                let e = &jac_bar[a * d + b];
                if e.iter().any(|&x| x != 0.0) {
                    let t = grid::partial_transpose(&geom, e, b);
                    for (dst, src) in f_cur[a].iter_mut().zip(t) {
                        *dst += src;
                    }
                }
            }
        }
        // forward step j: F_{j+1}(x) = F_j(x) + dt v_j(x + F_j(x))
        if step {
            let fwd = &flow.phi[j];
            let local: Vec<ForwardStepLocal> = (0..n)
                .into_par_iter()
                .map(|l| {
                    let c = grid::displaced_coords(&geom, l, &fwd.at(l));
                    let stencil = Stencil::at(&geom, &c);
                    let mut f_bar = [0.0; MAX_DIM];
                    for k in 0..d {
                        f_bar[k] = f_next[k][l];
                    }
                    for k in 0..d {
                        let fb = f_next[k][l];
                        if fb != 0.0 {
                            let vg = grid::interp_gradient(&geom, &c, v.component(k));
                            for (a, g) in vg.iter().enumerate().take(d) {
                                f_bar[a] += dt * fb * g;
                            }
                        }
                    }
                    ForwardStepLocal { stencil, f_bar }
                })
                .collect();
            for (l, loc) in local.iter().enumerate() {
                for k in 0..d {
                    f_cur[k][l] += loc.f_bar[k];
                    let fb = f_next[k][l];
                    if fb != 0.0 {
                        scatter(&mut v_bar[j][k], &loc.stencil, dt * fb);
                    }
                }
            }
        }
        f_next = f_cur;
        g_next = g_cur;
    }
    Ok(v_bar.into_iter().map(|c| VectorGrid::from_components_unchecked(geom, c)).collect())
}

/// `dC/dI_T` for the flow-of-transformations model: the transpose of the
/// action at every observation applied to `i_bar`.
pub fn template_derivative_fot(action: Action, flow: &FlowState, i_bar: &[ScalarGrid]) -> Result<ScalarGrid> {
    let tg = &flow.time_grid;
    if i_bar.len() != tg.n_obs() {
        return Err(GdrError::InvalidParameter("one cost derivative per observation required".into()));
    }
    let geom = *flow.geometry();
    let mut out = vec![0.0; geom.len()];
    for (i, ib) in i_bar.iter().enumerate() {
        let j = tg.obs_index(i);
        let inv = &flow.phi_inv[j];
        let jac = flow.jac_inv[j].values();
        for (l, &b) in ib.values().iter().enumerate() {
            if b != 0.0 {
                let scale = match action {
                    Action::Density => jac[l],
                    Action::Intensity => 1.0,
                };
                scatter(&mut out, &Stencil::displaced(&geom, l, &inv.at(l)), scale * b);
            }
        }
    }
    Ok(ScalarGrid::from_vec_unchecked(geom, out))
}

/// `dC/dv_j` for the flow-of-images model, `I_{j+1} = I_j - dt R(I_j, v_j)`.
pub fn velocity_derivative_foi(
    action: Action,
    flow: &FlowState,
    states: &[ScalarGrid],
    i_bar: &[ScalarGrid],
) -> Result<Vec<VectorGrid>> {
    foi_reverse(action, flow, states, i_bar).map(|(v, _)| v)
}

/// `dC/dI_T` for the flow-of-images model.
pub fn template_derivative_foi(
    action: Action,
    flow: &FlowState,
    states: &[ScalarGrid],
    i_bar: &[ScalarGrid],
) -> Result<ScalarGrid> {
    let geom = *flow.geometry();
    foi_reverse(action, flow, states, i_bar).map(|(_, lam)| ScalarGrid::from_vec_unchecked(geom, lam))
}

fn foi_reverse(
    action: Action,
    flow: &FlowState,
    states: &[ScalarGrid],
    i_bar: &[ScalarGrid],
) -> Result<(Vec<VectorGrid>, Vec<f64>)> {
    let tg = &flow.time_grid;
    let p = tg.points();
    if i_bar.len() != tg.n_obs() || states.len() != p {
        return Err(GdrError::InvalidParameter("state or cost-derivative count mismatch".into()));
    }
    let geom = *states[0].geometry();
    let d = geom.ndim();
    let n = geom.len();
    let mut lam = i_bar[tg.n_obs() - 1].values().to_vec();
    let mut out = vec![VectorGrid::zeros(geom); p];
    for j in (0..p - 1).rev() {
        let dt = tg.dt(j);
        let v = &flow.v[j];
        let img = states[j].values();
        let mut next = lam.clone();
        let mut vb = Vec::with_capacity(d);
        let di = match action {
            Action::Intensity => Some(grid::gradient(&states[j])),
            Action::Density => None,
        };
        for k in 0..d {
            let vk = v.component(k);
            match action {
                Action::Density => {
                    // R = sum_k D_k(I v_k)
                    let dt_lam = grid::partial_transpose(&geom, &lam, k);
                    for l in 0..n {
                        next[l] -= dt * vk[l] * dt_lam[l];
                    }
                    vb.push((0..n).map(|l| -dt * img[l] * dt_lam[l]).collect::<Vec<f64>>());
                }
                Action::Intensity => {
                    // R = sum_k v_k D_k I
                    let prod: Vec<f64> = (0..n).map(|l| vk[l] * lam[l]).collect();
                    let t = grid::partial_transpose(&geom, &prod, k);
                    for l in 0..n {
                        next[l] -= dt * t[l];
                    }
                    let dk = di.as_ref().expect("intensity gradient").component(k);
                    vb.push((0..n).map(|l| -dt * lam[l] * dk[l]).collect::<Vec<f64>>());
                }
            }
        }
        out[j] = VectorGrid::from_components_unchecked(geom, vb);
        if let Some(i) = (0..tg.n_obs()).find(|&i| tg.obs_index(i) == j) {
            for (x, y) in next.iter_mut().zip(i_bar[i].values()) {
                *x += y;
            }
        }
        lam = next;
    }
    Ok((out, lam))
}
